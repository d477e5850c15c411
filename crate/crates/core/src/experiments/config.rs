use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::ids::{stream_rng, AppId, Stream};
use crate::keystore::Design;
use crate::kmlink::{KmRole, KmSettings};
use crate::simcore::{
    provision_key_rate, AppModel, Encryption, QkdLinkModel, RetryMode, SimConfig, SimTime, AES_KEY_BITS,
};

pub const PRESETS: [&str; 5] = ["table1", "table2", "table3-hash", "table3-queue", "table3-deque"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumSpec {
    /// Candidate key rates; empty when the rate is provisioned from demand.
    #[serde(default)]
    pub key_rate_kbps: Vec<f64>,
    /// Headroom `a` of demand-based provisioning: rate = apps * app rate * (1 + a).
    #[serde(default)]
    pub provisioning_headroom: Option<f64>,
    pub key_size_bytes: Vec<usize>,
    pub start_s: f64,
    pub stop_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmSpec {
    pub design: Design,
    /// Each value is a separate cell of the experiment; the first is the
    /// reference size used for the per-design figure tables.
    pub default_key_size_bytes: Vec<usize>,
    #[serde(default = "defaults::capacity")]
    pub capacity_keys: usize,
    #[serde(default = "defaults::working_set")]
    pub working_set_bytes: usize,
    #[serde(default = "defaults::low_water")]
    pub low_water_fraction: f64,
    #[serde(default = "defaults::link_delay")]
    pub link_delay_s: f64,
    #[serde(default = "defaults::confirm_timeout")]
    pub confirm_timeout_s: f64,
    #[serde(default = "defaults::maintain_interval")]
    pub maintain_interval_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// One draw per run shared by every application of the group.
    #[default]
    PerRun,
    /// Every application draws its own parameters.
    PerApp,
}

/// Applications drawn from sets of candidate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppGroup {
    pub count: Vec<usize>,
    #[serde(default)]
    pub draw: DrawMode,
    pub packet_size_bytes: Vec<usize>,
    pub data_rate_kbps: Vec<f64>,
    pub hold_time_s: f64,
    /// GET_KEY round trip seen by a backlogged application.
    #[serde(default = "defaults::request_gap")]
    pub request_gap_s: f64,
    pub encryption: Vec<Encryption>,
    #[serde(default)]
    pub aes_lifetime_bytes: Vec<usize>,
    pub keys_per_query: Vec<usize>,
    pub start_s: Vec<f64>,
    pub stop_s: Vec<f64>,
}

/// Controlled supply sweep run on a warmed key-manager pair after each
/// simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub sizes_bits: Vec<u32>,
    pub keys_per_query: Vec<usize>,
    /// Requests per (size, keys_per_query) cell and run.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    pub runs: u64,
    /// Repetitions used with `--full`.
    pub full_runs: u64,
    pub quantum: QuantumSpec,
    pub km: KmSpec,
    pub service: Vec<AppGroup>,
    /// Treat every value of the single group's `count` as its own cell
    /// instead of drawing it per run.
    #[serde(default)]
    pub sweep_app_counts: bool,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
}

mod defaults {
    pub fn seed() -> u64 {
        100
    }
    pub fn capacity() -> usize {
        100_000
    }
    pub fn working_set() -> usize {
        16_384
    }
    pub fn low_water() -> f64 {
        0.25
    }
    pub fn link_delay() -> f64 {
        0.001
    }
    pub fn confirm_timeout() -> f64 {
        1.0
    }
    pub fn maintain_interval() -> f64 {
        0.1
    }
    pub fn request_gap() -> f64 {
        0.001
    }
}

/// One combination of swept parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub default_key_size_bytes: usize,
    /// Fixed application count when counts are swept.
    pub app_count: Option<usize>,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "default {} B", self.default_key_size_bytes)?;
        if let Some(n) = self.app_count {
            write!(f, ", {n} apps")?;
        }
        Ok(())
    }
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn non_empty<T>(field: &str, v: &[T]) -> Result<(), ExperimentError> {
    if v.is_empty() {
        return Err(invalid(field, "needs at least one value"));
    }
    Ok(())
}

fn all_positive(field: &str, v: &[f64]) -> Result<(), ExperimentError> {
    non_empty(field, v)?;
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(invalid(field, "values must be positive"));
    }
    Ok(())
}

fn all_nonzero(field: &str, v: &[usize]) -> Result<(), ExperimentError> {
    non_empty(field, v)?;
    if v.contains(&0) {
        return Err(invalid(field, "values must be positive"));
    }
    Ok(())
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, v: &[T]) -> T {
    *v.choose(rng).expect("validated non-empty")
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        let cfg = match name {
            "table1" => table1(),
            "table2" => table2(),
            "table3-hash" => table3(Design::EncDecHash),
            "table3-queue" => table3(Design::ByteQueue),
            "table3-deque" => table3(Design::AppSharedDeque),
            _ => return Err(ExperimentError::UnknownPreset(name.to_string())),
        };
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            ExperimentError::Parse(msg) => ExperimentError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides addressed by dotted paths, such as
    /// `km.default_key_size_bytes=128` or `service.0.count=[4,8]`.
    /// A scalar assigned to a list field replaces the list with that value.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ExperimentError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ExperimentError::Override(format!("`{item}` is not key=value")))?;
            set_path(&mut doc, key.trim(), raw.trim())?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| ExperimentError::Override(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.runs == 0 || self.full_runs == 0 {
            return Err(invalid("runs", "must be positive"));
        }
        let q = &self.quantum;
        match q.provisioning_headroom {
            Some(a) if !(a.is_finite() && a >= 0.0) => {
                return Err(invalid("quantum.provisioning_headroom", "must be non-negative"))
            }
            Some(_) if !q.key_rate_kbps.is_empty() => {
                return Err(invalid(
                    "quantum.key_rate_kbps",
                    "leave empty when provisioning_headroom sets the rate",
                ))
            }
            Some(_) => {}
            None => all_positive("quantum.key_rate_kbps", &q.key_rate_kbps)?,
        }
        all_nonzero("quantum.key_size_bytes", &q.key_size_bytes)?;
        if !(q.start_s >= 0.0 && q.stop_s >= q.start_s) {
            return Err(invalid("quantum.stop_s", "must not precede start_s"));
        }
        let km = &self.km;
        all_nonzero("km.default_key_size_bytes", &km.default_key_size_bytes)?;
        if km.capacity_keys == 0 {
            return Err(invalid("km.capacity_keys", "must be positive"));
        }
        if !(0.0..=1.0).contains(&km.low_water_fraction) {
            return Err(invalid("km.low_water_fraction", "must lie in [0, 1]"));
        }
        for (field, v) in [
            ("km.link_delay_s", km.link_delay_s),
            ("km.confirm_timeout_s", km.confirm_timeout_s),
            ("km.maintain_interval_s", km.maintain_interval_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, "must be positive"));
            }
        }
        non_empty("service", &self.service)?;
        if self.sweep_app_counts && self.service.len() != 1 {
            return Err(invalid("sweep_app_counts", "needs exactly one service group"));
        }
        let mut largest_request = 0;
        for (i, g) in self.service.iter().enumerate() {
            let f = |name: &str| format!("service.{i}.{name}");
            all_nonzero(&f("count"), &g.count)?;
            all_nonzero(&f("packet_size_bytes"), &g.packet_size_bytes)?;
            all_positive(&f("data_rate_kbps"), &g.data_rate_kbps)?;
            if !(g.hold_time_s.is_finite() && g.hold_time_s >= 1e-6) {
                return Err(invalid(f("hold_time_s"), "must be at least one microsecond"));
            }
            if !(g.request_gap_s.is_finite() && g.request_gap_s >= 0.0) {
                return Err(invalid(f("request_gap_s"), "must be non-negative"));
            }
            non_empty(&f("encryption"), &g.encryption)?;
            if g.encryption.contains(&Encryption::Aes) {
                all_nonzero(&f("aes_lifetime_bytes"), &g.aes_lifetime_bytes)?;
            }
            all_nonzero(&f("keys_per_query"), &g.keys_per_query)?;
            non_empty(&f("start_s"), &g.start_s)?;
            non_empty(&f("stop_s"), &g.stop_s)?;
            let first_stop = g.stop_s.iter().cloned().fold(f64::INFINITY, f64::min);
            if g.start_s.iter().any(|s| !(*s >= 0.0 && *s <= first_stop)) {
                return Err(invalid(f("start_s"), "every start must precede every stop"));
            }
            let kpq = *g.keys_per_query.iter().max().expect("non-empty");
            for e in &g.encryption {
                let bits = match e {
                    Encryption::Otp => *g.packet_size_bytes.iter().max().expect("non-empty") * 8,
                    Encryption::Aes => AES_KEY_BITS as usize,
                };
                largest_request = largest_request.max(bits / 8 * kpq);
            }
            if km.design == Design::SingleCommon {
                let fixed = km.default_key_size_bytes.iter().all(|&d| {
                    g.encryption == [Encryption::Otp] && g.packet_size_bytes.iter().all(|&p| p == d)
                });
                if !fixed {
                    return Err(invalid(
                        f("packet_size_bytes"),
                        "the single design serves one-time-pad keys of the default size only",
                    ));
                }
            }
        }
        if let Some(b) = &self.bench {
            if km.design == Design::SingleCommon {
                return Err(invalid("bench", "the single design has no supply sweep"));
            }
            non_empty("bench.sizes_bits", &b.sizes_bits)?;
            if b.sizes_bits.iter().any(|s| *s == 0 || s % 8 != 0) {
                return Err(invalid("bench.sizes_bits", "sizes must be positive multiples of 8"));
            }
            all_nonzero("bench.keys_per_query", &b.keys_per_query)?;
            if b.repeats == 0 {
                return Err(invalid("bench.repeats", "must be positive"));
            }
            let s = *b.sizes_bits.iter().max().expect("non-empty") as usize / 8;
            let k = *b.keys_per_query.iter().max().expect("non-empty");
            largest_request = largest_request.max(s * k);
        }
        // Stores are only refilled once they drop below the low-water mark, so
        // that mark must cover any single request or a short store never refills.
        if km.design != Design::SingleCommon {
            for &d in &km.default_key_size_bytes {
                let low_bytes = self.km_settings(Cell { default_key_size_bytes: d, app_count: None })
                    .water_marks(d)
                    .low
                    * d;
                if low_bytes < largest_request {
                    return Err(invalid(
                        "km.working_set_bytes",
                        format!(
                            "the low-water level ({low_bytes} bytes at default {d}) must hold the largest request ({largest_request} bytes)"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn run_count(&self, full: bool) -> u64 {
        if full {
            self.full_runs
        } else {
            self.runs
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let counts: Vec<Option<usize>> = if self.sweep_app_counts {
            self.service[0].count.iter().map(|&n| Some(n)).collect()
        } else {
            vec![None]
        };
        let mut cells = Vec::new();
        for &d in &self.km.default_key_size_bytes {
            for &n in &counts {
                cells.push(Cell {
                    default_key_size_bytes: d,
                    app_count: n,
                });
            }
        }
        cells
    }

    /// Digest of everything except the repetition counts, shared by all
    /// runs of one experiment.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.runs = 0;
        c.full_runs = 0;
        Sha256::digest(serde_json::to_vec(&c).expect("config serializes")).into()
    }

    pub fn km_settings(&self, cell: Cell) -> KmSettings {
        KmSettings {
            design: self.km.design,
            default_key_size_bytes: cell.default_key_size_bytes,
            capacity_keys: self.km.capacity_keys,
            working_set_bytes: self.km.working_set_bytes,
            low_water_fraction: self.km.low_water_fraction,
            retain_deliverables: false,
        }
    }

    /// Draws the applications and link of run `run` in `cell`. The draw does
    /// not depend on the design or the default key size.
    pub fn sim_config(&self, cell: Cell, run: u64) -> Result<SimConfig, ExperimentError> {
        let mut rng = stream_rng(self.seed, run, Stream::Workload);
        let q = &self.quantum;
        let drawn_rate = (!q.key_rate_kbps.is_empty()).then(|| pick(&mut rng, &q.key_rate_kbps));
        let key_size = pick(&mut rng, &q.key_size_bytes);
        let mut apps = Vec::new();
        for g in &self.service {
            let count = cell.app_count.unwrap_or_else(|| pick(&mut rng, &g.count));
            let mut shared = None;
            for _ in 0..count {
                let draw = match (g.draw, shared) {
                    (DrawMode::PerRun, Some(d)) => d,
                    _ => {
                        let d = AppDraw::new(&mut rng, g);
                        shared = Some(d);
                        d
                    }
                };
                let i = apps.len();
                apps.push(AppModel {
                    id: AppId(i as u32),
                    side: if i % 2 == 0 { KmRole::Master } else { KmRole::Slave },
                    packet_size_bytes: draw.packet_size_bytes,
                    data_rate_bps: draw.data_rate_kbps * 1000.0,
                    encryption: draw.encryption,
                    aes_lifetime_bytes: draw.aes_lifetime_bytes,
                    keys_per_query: draw.keys_per_query,
                    hold: SimTime::from_secs_f64(g.hold_time_s),
                    request_gap: SimTime::from_secs_f64(g.request_gap_s),
                    start: SimTime::from_secs_f64(draw.start_s),
                    stop: SimTime::from_secs_f64(draw.stop_s),
                });
            }
        }
        let key_rate_bps = match (drawn_rate, q.provisioning_headroom) {
            (Some(kbps), _) => kbps * 1000.0,
            (None, Some(a)) => {
                let mean = apps.iter().map(|a| a.data_rate_bps).sum::<f64>() / apps.len() as f64;
                provision_key_rate(apps.len(), mean, a)?
            }
            (None, None) => unreachable!("validated"),
        };
        Ok(SimConfig {
            seed: self.seed,
            run,
            quantum: QkdLinkModel {
                key_rate_bps,
                key_size_bytes: key_size,
                start: SimTime::from_secs_f64(q.start_s),
                stop: SimTime::from_secs_f64(q.stop_s),
            },
            km: self.km_settings(cell),
            link_delay: SimTime::from_secs_f64(self.km.link_delay_s),
            confirm_timeout: SimTime::from_secs_f64(self.km.confirm_timeout_s),
            maintain_interval: SimTime::from_secs_f64(self.km.maintain_interval_s),
            apps,
            retry: RetryMode::Coalesce,
            record_messages: false,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct AppDraw {
    packet_size_bytes: usize,
    data_rate_kbps: f64,
    encryption: Encryption,
    aes_lifetime_bytes: usize,
    keys_per_query: usize,
    start_s: f64,
    stop_s: f64,
}

impl AppDraw {
    fn new(rng: &mut ChaCha8Rng, g: &AppGroup) -> Self {
        let packet_size_bytes = pick(rng, &g.packet_size_bytes);
        let data_rate_kbps = pick(rng, &g.data_rate_kbps);
        let encryption = pick(rng, &g.encryption);
        let aes_lifetime_bytes = match encryption {
            Encryption::Aes => pick(rng, &g.aes_lifetime_bytes),
            Encryption::Otp => 0,
        };
        Self {
            packet_size_bytes,
            data_rate_kbps,
            encryption,
            aes_lifetime_bytes,
            keys_per_query: pick(rng, &g.keys_per_query),
            start_s: pick(rng, &g.start_s),
            stop_s: pick(rng, &g.stop_s),
        }
    }
}

fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<(), ExperimentError> {
    let unknown = || ExperimentError::Override(format!("unknown config key `{key}`"));
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    *node = match (&*node, value) {
        (Value::Array(_), v @ Value::Array(_)) => v,
        (Value::Array(_), v) => Value::Array(vec![v]),
        (Value::Object(_), v) if !v.is_object() => {
            return Err(ExperimentError::Override(format!("`{key}` is a section, not a value")))
        }
        (_, v) => v,
    };
    Ok(())
}

fn range_f(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(f64::from).collect()
}

fn table1() -> ExperimentConfig {
    ExperimentConfig {
        name: "table1".into(),
        seed: 100,
        runs: 10,
        full_runs: 50,
        quantum: QuantumSpec {
            key_rate_kbps: vec![10.0, 50.0, 100.0, 500.0],
            provisioning_headroom: None,
            key_size_bytes: vec![1024, 2048, 4096, 8192, 16384, 32768],
            start_s: 0.0,
            stop_s: 70.0,
        },
        km: km(Design::SingleCommon, vec![64]),
        service: vec![AppGroup {
            count: vec![2, 4, 6, 8, 10, 12],
            draw: DrawMode::PerRun,
            packet_size_bytes: vec![64],
            data_rate_kbps: range_f(1, 10),
            hold_time_s: 10e-6,
            request_gap_s: defaults::request_gap(),
            encryption: vec![Encryption::Otp],
            aes_lifetime_bytes: vec![],
            keys_per_query: vec![1],
            start_s: vec![0.0, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0],
            stop_s: vec![80.0, 85.0, 90.0, 95.0, 100.0],
        }],
        sweep_app_counts: false,
        bench: None,
    }
}

fn table2() -> ExperimentConfig {
    ExperimentConfig {
        name: "table2".into(),
        seed: 100,
        runs: 100,
        full_runs: 1000,
        quantum: QuantumSpec {
            key_rate_kbps: vec![],
            provisioning_headroom: Some(0.1),
            key_size_bytes: vec![2048, 4096, 8192],
            start_s: 0.0,
            stop_s: 100.0,
        },
        km: km(Design::SingleCommon, vec![64]),
        service: vec![AppGroup {
            count: vec![2, 4, 8, 20],
            draw: DrawMode::PerRun,
            packet_size_bytes: vec![64],
            data_rate_kbps: vec![1.0, 2.0, 4.0],
            hold_time_s: 0.1,
            request_gap_s: defaults::request_gap(),
            encryption: vec![Encryption::Otp],
            aes_lifetime_bytes: vec![],
            keys_per_query: vec![1],
            start_s: vec![1.0],
            stop_s: vec![100.0],
        }],
        sweep_app_counts: true,
        bench: None,
    }
}

fn table3(design: Design) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("table3-{}", design.name()),
        seed: 100,
        runs: 100,
        full_runs: 1000,
        quantum: QuantumSpec {
            key_rate_kbps: vec![10.0, 50.0, 100.0],
            provisioning_headroom: None,
            key_size_bytes: vec![1024, 2048, 4096, 8192, 16384, 32768],
            start_s: 0.0,
            stop_s: 100.0,
        },
        km: KmSpec {
            working_set_bytes: 32_768,
            ..km(design, vec![64, 32, 128])
        },
        service: vec![AppGroup {
            count: vec![2, 4, 6, 8, 10, 12, 20],
            draw: DrawMode::PerApp,
            packet_size_bytes: vec![100, 200, 300, 400, 500],
            data_rate_kbps: range_f(1, 10),
            hold_time_s: 10e-6,
            request_gap_s: defaults::request_gap(),
            encryption: vec![Encryption::Otp, Encryption::Aes],
            aes_lifetime_bytes: vec![1000, 5000, 10000, 50000],
            keys_per_query: (1..=6).collect(),
            start_s: vec![1.0, 2.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 20.0, 40.0, 50.0],
            stop_s: vec![70.0, 75.0, 85.0, 90.0, 95.0, 100.0],
        }],
        sweep_app_counts: false,
        bench: Some(BenchSpec {
            sizes_bits: vec![256, 512, 1024, 2048, 4096, 8192],
            keys_per_query: (1..=6).collect(),
            repeats: 3,
        }),
    }
}

fn km(design: Design, default_key_size_bytes: Vec<usize>) -> KmSpec {
    KmSpec {
        design,
        default_key_size_bytes,
        capacity_keys: defaults::capacity(),
        working_set_bytes: defaults::working_set(),
        low_water_fraction: defaults::low_water(),
        link_delay_s: defaults::link_delay(),
        confirm_timeout_s: defaults::confirm_timeout(),
        maintain_interval_s: defaults::maintain_interval(),
    }
}
