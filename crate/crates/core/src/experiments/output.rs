use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::metrics::{CollisionStats, RunningStats, TimingKey, TimingTable};
use super::runner::{BenchReport, DequeSharing, ExperimentSummary};
use super::ExperimentError;
use crate::keystore::Design;

const TIMING_HEADER: [&str; 7] = [
    "design",
    "requested_size_bits",
    "keys_per_query",
    "default_key_size_bits",
    "mean_us",
    "stddev_us",
    "n",
];

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ExperimentError> {
    csv::Writer::from_path(path).map_err(|e| ExperimentError::csv(path, e))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<PathBuf, ExperimentError> {
    w.flush().map_err(|e| ExperimentError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Collision counts per residual bin.
pub fn write_fig6a(path: &Path, stats: &CollisionStats) -> Result<PathBuf, ExperimentError> {
    let mut w = writer(path)?;
    let err = |e| ExperimentError::csv(path, e);
    w.write_record(["bin_low", "bin_high", "collisions", "successes", "percentage"])
        .map_err(err)?;
    for b in &stats.bins {
        let high = b.high.map_or("inf".to_string(), |h| h.to_string());
        w.write_record([
            b.low.to_string(),
            high,
            b.tally.collisions.to_string(),
            b.tally.successes.to_string(),
            num(b.tally.percentage()),
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

/// Collision percentage per application count, inside the residual window.
pub fn write_fig6b(path: &Path, stats: &CollisionStats) -> Result<PathBuf, ExperimentError> {
    let mut w = writer(path)?;
    let err = |e| ExperimentError::csv(path, e);
    w.write_record(["app_count", "percentage"]).map_err(err)?;
    for (n, t) in &stats.per_app_count {
        w.write_record([n.to_string(), num(t.percentage())]).map_err(err)?;
    }
    finish(path, w)
}

/// One row per timing group, in group order.
pub fn write_timing<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a TimingKey, &'a RunningStats)>,
) -> Result<PathBuf, ExperimentError> {
    let mut w = writer(path)?;
    let err = |e| ExperimentError::csv(path, e);
    w.write_record(TIMING_HEADER).map_err(err)?;
    for (k, s) in rows {
        w.write_record([
            k.design.to_string(),
            k.requested_size_bits.to_string(),
            k.keys_per_query.to_string(),
            k.default_key_size_bits.to_string(),
            num(s.mean()),
            num(s.stddev()),
            s.n().to_string(),
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

pub fn write_deque_sharing(path: &Path, d: &DequeSharing) -> Result<PathBuf, ExperimentError> {
    let mut w = writer(path)?;
    let err = |e| ExperimentError::csv(path, e);
    w.write_record([
        "runs",
        "mean_app_count",
        "mean_deque_count",
        "mean_distinct_sizes",
    ])
    .map_err(err)?;
    w.write_record([
        d.runs.to_string(),
        num(d.apps.mean()),
        num(d.deques.mean()),
        num(d.distinct_sizes.mean()),
    ])
    .map_err(err)?;
    finish(path, w)
}

fn figure_number(design: Design) -> Option<u8> {
    match design {
        Design::SingleCommon => None,
        Design::EncDecHash => Some(7),
        Design::ByteQueue => Some(8),
        Design::AppSharedDeque => Some(9),
    }
}

/// Writes the tables relevant to the summary's design into `dir`:
/// `fig6a`/`fig6b` for the single store, `fig7`-`fig9` pairs for the
/// others (`a`: every sweep group at the reference default size, `b`: one
/// key per query across default sizes), the simulated workload's timings,
/// and the deque-sharing averages.
pub fn emit_csv(summary: &ExperimentSummary, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let mut written = Vec::new();
    let design = summary.design;
    if design.is_none_or(Design::can_collide) {
        written.push(write_fig6a(&dir.join("fig6a.csv"), &summary.collisions)?);
        written.push(write_fig6b(&dir.join("fig6b.csv"), &summary.collisions)?);
    }
    if let Some(fig) = design.and_then(figure_number) {
        let reference = summary.reference_default_bits;
        let a = summary
            .bench_timing
            .iter()
            .filter(|(k, _)| Some(k.default_key_size_bits) == reference);
        written.push(write_timing(&dir.join(format!("fig{fig}a.csv")), a)?);
        let b = summary.bench_timing.iter().filter(|(k, _)| k.keys_per_query == 1);
        written.push(write_timing(&dir.join(format!("fig{fig}b.csv")), b)?);
        written.push(write_timing(&dir.join("workload_timing.csv"), &summary.workload_timing)?);
    }
    if let Some(d) = &summary.deque_sharing {
        written.push(write_deque_sharing(&dir.join("deque_sharing.csv"), d)?);
    }
    Ok(written)
}

/// Side-by-side sweep comparison: one row per (size, keys per query,
/// default size) and three columns per design. A long-form table with the
/// timing schema goes next to it.
pub fn emit_bench_csv(report: &BenchReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let path = dir.join("bench.csv");
    let mut w = writer(&path)?;
    let err = |e| ExperimentError::csv(&path, e);
    let mut header = vec![
        "requested_size_bits".to_string(),
        "keys_per_query".to_string(),
        "default_key_size_bits".to_string(),
    ];
    for d in &report.designs {
        header.extend([format!("{d}_mean_us"), format!("{d}_stddev_us"), format!("{d}_n")]);
    }
    w.write_record(&header).map_err(err)?;
    let rows: BTreeSet<(u32, u32, u32)> = report
        .timing
        .keys()
        .map(|k| (k.requested_size_bits, k.keys_per_query, k.default_key_size_bits))
        .collect();
    for (size, kpq, default) in rows {
        let mut record = vec![size.to_string(), kpq.to_string(), default.to_string()];
        for &design in &report.designs {
            let key = TimingKey {
                design,
                requested_size_bits: size,
                keys_per_query: kpq,
                default_key_size_bits: default,
            };
            match report.timing.get(&key) {
                Some(s) => record.extend([num(s.mean()), num(s.stddev()), s.n().to_string()]),
                None => record.extend([String::new(), String::new(), "0".to_string()]),
            }
        }
        w.write_record(&record).map_err(err)?;
    }
    let wide = finish(&path, w)?;
    let long = write_timing(&dir.join("bench_groups.csv"), &report.timing)?;
    Ok(vec![wide, long])
}

/// Convenience for callers holding a bare table.
pub fn write_timing_table(path: &Path, table: &TimingTable) -> Result<PathBuf, ExperimentError> {
    write_timing(path, table)
}
