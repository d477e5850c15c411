use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::bench::{run_config_sweep, run_sweep};
use super::config::{Cell, ExperimentConfig};
use super::metrics::{
    bin_collisions, merge_timing, timing_groups, CollisionStats, RunningStats, TimingTable, DEFAULT_BIN_EDGES,
};
use super::ExperimentError;
use crate::keystore::Design;
use crate::simcore::{self, RunCounters};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Use the paper-scale repetition count.
    pub full: bool,
    /// Overrides the repetition count.
    pub runs: Option<u64>,
}

impl RunOptions {
    pub fn run_count(&self, cfg: &ExperimentConfig) -> u64 {
        self.runs.unwrap_or_else(|| cfg.run_count(self.full))
    }
}

/// Everything kept from one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub fingerprint: [u8; 32],
    pub design: Design,
    pub cell: Cell,
    pub run: u64,
    pub app_count: usize,
    pub trace_hash: [u8; 32],
    pub workload_hash: [u8; 32],
    /// Digest of the supply sweep's requests, when the experiment has one.
    pub request_hash: Option<[u8; 32]>,
    pub mirrored: bool,
    pub counters: RunCounters,
    pub collisions: CollisionStats,
    pub workload_timing: TimingTable,
    pub bench_timing: TimingTable,
    pub deque_count: usize,
    pub distinct_sizes: usize,
}

pub fn run_one(cfg: &ExperimentConfig, cell: Cell, run: u64) -> Result<RunRecord, ExperimentError> {
    let sim = cfg.sim_config(cell, run)?;
    let trace = simcore::run(&sim)?;
    let sweep = run_config_sweep(cfg, cell, run)?;
    Ok(RunRecord {
        fingerprint: cfg.fingerprint(),
        design: cfg.km.design,
        cell,
        run,
        app_count: trace.app_count,
        trace_hash: trace.trace_hash(),
        workload_hash: trace.workload_hash,
        request_hash: sweep.as_ref().map(|s| s.request_hash),
        mirrored: trace.mirrored(),
        counters: trace.counters,
        collisions: bin_collisions(&trace, &DEFAULT_BIN_EDGES),
        workload_timing: timing_groups(&trace),
        bench_timing: sweep.map(|s| s.timing).unwrap_or_default(),
        deque_count: trace.deque_count,
        distinct_sizes: trace.distinct_sizes,
    })
}

/// Runs every cell `opts.run_count` times with run numbers 1, 2, ... from
/// the configured seed. Cells are interleaved within each run number so slow
/// drift of the host clock spreads evenly across them.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: RunOptions,
    mut progress: impl FnMut(&RunRecord),
) -> Result<Vec<RunRecord>, ExperimentError> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut records = Vec::new();
    for run in 1..=opts.run_count(cfg) {
        for &cell in &cells {
            let r = run_one(cfg, cell, run)?;
            progress(&r);
            records.push(r);
        }
    }
    Ok(records)
}

/// Application and deque counts of application-shared-deque runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DequeSharing {
    pub runs: u64,
    pub apps: RunningStats,
    pub deques: RunningStats,
    pub distinct_sizes: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub fingerprint: Option<[u8; 32]>,
    pub design: Option<Design>,
    pub runs: u64,
    /// Default key size the per-design figure tables are drawn at.
    pub reference_default_bits: Option<u32>,
    pub collisions: CollisionStats,
    /// Collision percentage of each run.
    pub run_collision_percentage: RunningStats,
    pub workload_timing: TimingTable,
    pub bench_timing: TimingTable,
    pub deque_sharing: Option<DequeSharing>,
    pub unmirrored_runs: u64,
}

/// Pools the records of one experiment. Records of different experiments
/// are refused.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<ExperimentSummary, ExperimentError> {
    let mut s = ExperimentSummary {
        fingerprint: records.first().map(|r| r.fingerprint),
        design: records.first().map(|r| r.design),
        runs: records.len() as u64,
        reference_default_bits: records.first().map(|r| (r.cell.default_key_size_bytes * 8) as u32),
        collisions: CollisionStats::new(&DEFAULT_BIN_EDGES),
        run_collision_percentage: RunningStats::default(),
        workload_timing: TimingTable::new(),
        bench_timing: TimingTable::new(),
        deque_sharing: None,
        unmirrored_runs: 0,
    };
    let mut sharing = DequeSharing::default();
    for r in records {
        if Some(r.fingerprint) != s.fingerprint {
            return Err(ExperimentError::Mixed);
        }
        s.collisions.merge(&r.collisions);
        s.run_collision_percentage.push(r.collisions.total().percentage());
        merge_timing(&mut s.workload_timing, &r.workload_timing);
        merge_timing(&mut s.bench_timing, &r.bench_timing);
        if !r.mirrored {
            s.unmirrored_runs += 1;
        }
        if r.design == Design::AppSharedDeque {
            sharing.runs += 1;
            sharing.apps.push(r.app_count as f64);
            sharing.deques.push(r.deque_count as f64);
            sharing.distinct_sizes.push(r.distinct_sizes as f64);
        }
    }
    if sharing.runs > 0 {
        s.deque_sharing = Some(sharing);
    }
    Ok(s)
}

impl ExperimentSummary {
    /// Human-oriented overview for a terminal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let design = self.design.map_or("-".to_string(), |d| d.to_string());
        let _ = writeln!(out, "design {design}, {} runs", self.runs);
        let total = self.collisions.total();
        if total.total() > 0 {
            let _ = writeln!(out, "{:<14} {:>10} {:>10} {:>9}", "residual", "collisions", "successes", "percent");
            for b in &self.collisions.bins {
                let _ = writeln!(
                    out,
                    "{:<14} {:>10} {:>10} {:>8.3}%",
                    b.to_string(),
                    b.tally.collisions,
                    b.tally.successes,
                    b.tally.percentage()
                );
            }
            if self.collisions.per_app_count.len() > 1 {
                let _ = writeln!(out, "{:<14} {:>9}", "apps (10-100)", "percent");
                for (n, t) in &self.collisions.per_app_count {
                    let _ = writeln!(out, "{n:<14} {:>8.3}%", t.percentage());
                }
            }
        }
        for (title, table) in [("sweep", &self.bench_timing), ("workload", &self.workload_timing)] {
            if table.is_empty() {
                continue;
            }
            let mut by_default: BTreeMap<u32, RunningStats> = BTreeMap::new();
            for (k, v) in table {
                by_default.entry(k.default_key_size_bits).or_default().merge(v);
            }
            for (d, v) in by_default {
                let _ = writeln!(
                    out,
                    "{title} timing, default {d} bits: mean {:.3} us over {} supplies",
                    v.mean(),
                    v.n()
                );
            }
        }
        if let Some(d) = &self.deque_sharing {
            let _ = writeln!(
                out,
                "deque sharing: {:.2} applications, {:.2} deques, {:.2} distinct sizes on average",
                d.apps.mean(),
                d.deques.mean(),
                d.distinct_sizes.mean()
            );
        }
        if self.unmirrored_runs > 0 {
            let _ = writeln!(out, "WARNING: {} runs ended with diverged stores", self.unmirrored_runs);
        }
        out
    }
}

/// Supply-sweep timings of several designs under one request sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub designs: Vec<Design>,
    pub runs: u64,
    pub timing: TimingTable,
    /// Request digests per run, in run order, for each design.
    pub request_hashes: BTreeMap<Design, Vec<[u8; 32]>>,
}

impl BenchReport {
    /// Whether every design saw exactly the same requests.
    pub fn identical_requests(&self) -> bool {
        let mut it = self.request_hashes.values();
        let Some(first) = it.next() else {
            return true;
        };
        it.all(|h| h == first)
    }
}

/// Runs the configured sweep against each design in turn, interleaving the
/// designs within every run.
pub fn bench_designs(
    cfg: &ExperimentConfig,
    designs: &[Design],
    opts: RunOptions,
    mut progress: impl FnMut(u64),
) -> Result<BenchReport, ExperimentError> {
    let Some(spec) = &cfg.bench else {
        return Err(ExperimentError::Invalid {
            field: "bench".into(),
            reason: "the configuration has no supply sweep".into(),
        });
    };
    if designs.is_empty() {
        return Err(ExperimentError::Invalid {
            field: "designs".into(),
            reason: "name at least one design".into(),
        });
    }
    for &d in designs {
        if d == Design::SingleCommon {
            return Err(ExperimentError::Invalid {
                field: "designs".into(),
                reason: "the single design has no supply sweep".into(),
            });
        }
    }
    cfg.validate()?;
    let block = cfg.quantum.key_size_bytes[0];
    let mut report = BenchReport {
        designs: designs.to_vec(),
        runs: opts.run_count(cfg),
        timing: TimingTable::new(),
        request_hashes: BTreeMap::new(),
    };
    for run in 1..=report.runs {
        for cell in cfg.cells() {
            for &design in designs {
                let mut settings = cfg.km_settings(cell);
                settings.design = design;
                let out = run_sweep(settings, spec, block, cfg.seed, run)?;
                merge_timing(&mut report.timing, &out.timing);
                report.request_hashes.entry(design).or_default().push(out.request_hash);
            }
        }
        progress(run);
    }
    Ok(report)
}
