use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::keystore::Design;
use crate::simcore::{Outcome, RunTrace};

/// Residual-count bin edges; the last bin is unbounded.
pub const DEFAULT_BIN_EDGES: [u64; 4] = [0, 10, 100, 1000];

/// Residual window for the application-count comparison, inclusive.
pub const APP_COUNT_WINDOW: (u64, u64) = (10, 100);

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; zero below two samples.
    pub fn stddev(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub collisions: u64,
    pub successes: u64,
}

impl Tally {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Collision => self.collisions += 1,
            Outcome::Success => self.successes += 1,
        }
    }

    pub fn add(&mut self, other: &Tally) {
        self.collisions += other.collisions;
        self.successes += other.successes;
    }

    pub fn total(&self) -> u64 {
        self.collisions + self.successes
    }

    /// Collisions as a percentage of all key accesses; zero when empty.
    pub fn percentage(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.collisions as f64 * 100.0 / t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub low: u64,
    /// Exclusive upper edge; `None` is unbounded.
    pub high: Option<u64>,
    pub tally: Tally,
}

impl Bin {
    pub fn contains(&self, residual: u64) -> bool {
        residual >= self.low && self.high.is_none_or(|h| residual < h)
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.high {
            Some(h) => write!(f, "[{}, {})", self.low, h),
            None => write!(f, "[{}, inf)", self.low),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionStats {
    pub bins: Vec<Bin>,
    /// Accesses with a residual count inside [`APP_COUNT_WINDOW`], by the
    /// run's application count.
    pub per_app_count: BTreeMap<usize, Tally>,
}

impl CollisionStats {
    /// Empty bins over `edges`, which must start at zero and increase.
    pub fn new(edges: &[u64]) -> Self {
        assert!(edges.first() == Some(&0), "bins must start at zero");
        assert!(edges.windows(2).all(|w| w[0] < w[1]), "edges must increase");
        let bins = edges
            .iter()
            .enumerate()
            .map(|(i, &low)| Bin {
                low,
                high: edges.get(i + 1).copied(),
                tally: Tally::default(),
            })
            .collect();
        Self {
            bins,
            per_app_count: BTreeMap::new(),
        }
    }

    pub fn merge(&mut self, other: &CollisionStats) {
        assert_eq!(self.bins.len(), other.bins.len(), "bin layouts differ");
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.tally.add(&b.tally);
        }
        for (n, t) in &other.per_app_count {
            self.per_app_count.entry(*n).or_default().add(t);
        }
    }

    pub fn total(&self) -> Tally {
        let mut t = Tally::default();
        self.bins.iter().for_each(|b| t.add(&b.tally));
        t
    }

    pub fn bin(&self, low: u64) -> Option<&Bin> {
        self.bins.iter().find(|b| b.low == low)
    }
}

/// Buckets every key access of a single-common run by the residual key
/// count seen when the request was read. Other designs cannot collide and
/// give empty bins.
pub fn bin_collisions(trace: &RunTrace, edges: &[u64]) -> CollisionStats {
    let mut stats = CollisionStats::new(edges);
    if !trace.design.can_collide() {
        return stats;
    }
    let (lo, hi) = APP_COUNT_WINDOW;
    let window = stats.per_app_count.entry(trace.app_count).or_default();
    for a in &trace.attempts {
        if (lo..=hi).contains(&a.residual) {
            window.record(a.outcome);
        }
    }
    for a in &trace.attempts {
        let bin = stats
            .bins
            .iter_mut()
            .find(|b| b.contains(a.residual))
            .expect("bins cover every count");
        bin.tally.record(a.outcome);
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimingKey {
    pub design: Design,
    pub requested_size_bits: u32,
    pub keys_per_query: u32,
    pub default_key_size_bits: u32,
}

/// Supply-creation times in microseconds by group.
pub type TimingTable = BTreeMap<TimingKey, RunningStats>;

pub fn merge_timing(into: &mut TimingTable, from: &TimingTable) {
    for (k, s) in from {
        into.entry(*k).or_default().merge(s);
    }
}

/// Groups the timed supplies of one simulated run.
pub fn timing_groups(trace: &RunTrace) -> TimingTable {
    let mut table = TimingTable::new();
    for t in &trace.timing {
        let key = TimingKey {
            design: trace.design,
            requested_size_bits: t.size_bits,
            keys_per_query: t.count,
            default_key_size_bits: trace.default_key_size_bits,
        };
        table.entry(key).or_default().push(t.nanos as f64 / 1000.0);
    }
    table
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Coefficient of variation of `values`, using the population deviation.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}
