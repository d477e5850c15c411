//! Preset experiments, per-run metrics, aggregation over repetitions and
//! CSV tables.

mod bench;
mod config;
mod metrics;
mod output;
mod runner;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use bench::{run_config_sweep, run_sweep, sweep_requests, SweepOutcome, SweepRequest};
pub use config::{AppGroup, BenchSpec, Cell, DrawMode, ExperimentConfig, KmSpec, QuantumSpec, PRESETS};
pub use metrics::{
    bin_collisions, coefficient_of_variation, merge_timing, spearman, timing_groups, Bin, CollisionStats,
    RunningStats, Tally, TimingKey, TimingTable, APP_COUNT_WINDOW, DEFAULT_BIN_EDGES,
};
pub use output::{
    emit_bench_csv, emit_csv, write_deque_sharing, write_fig6a, write_fig6b, write_timing, write_timing_table,
};
pub use runner::{
    aggregate_runs, bench_designs, run_experiment, run_one, BenchReport, DequeSharing, ExperimentSummary,
    RunOptions, RunRecord,
};

use crate::keystore::KeystoreError;
use crate::kmlink::LinkError;
use crate::simcore::SimError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("override: {0}")]
    Override(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Keystore(#[from] KeystoreError),
    #[error("bench: {0}")]
    Bench(String),
    #[error("runs of different experiments cannot be aggregated")]
    Mixed,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(path: &Path, source: csv::Error) -> Self {
        ExperimentError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether the error lies in the configuration rather than the host.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::UnknownPreset(_)
                | ExperimentError::Parse(_)
                | ExperimentError::Invalid { .. }
                | ExperimentError::Override(_)
                | ExperimentError::Sim(SimError::Invalid { .. })
        )
    }
}
