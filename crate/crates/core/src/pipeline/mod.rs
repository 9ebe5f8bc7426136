//! Experiment orchestration: full ensemble runs, leave-one-out ablations,
//! threshold sweeps and their reports.

mod cache;
mod config;
mod manifest;
mod report;
mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use cache::{volume_hash, CacheKey, PredictionCache};
pub use config::{PairSelector, RunConfig, DEFAULT_SEED};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use report::{emit_report, render_report, report_table, summary, ReportFormat, ReportTable};
pub use run::{
    augmented_view, display_names, run_ablation, run_ablation_with, run_segtta, run_segtta_with,
    run_threshold_sweep, run_threshold_sweep_with, Aggregate, CaseFailure, CaseResult, Experiment,
    RunContext, RunResult, Timings, VariantResult,
};

use crate::fusion::FusionError;
use crate::nifti::NiftiError;

/// Errors that abort a whole experiment. Problems with a single case are
/// recorded in [`RunResult::failures`] instead.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("ablation needs at least 2 augmentations, got {count}")]
    InsufficientAugmentations { count: usize },
    #[error("tau must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("I/O failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::IoFailure {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidTau(t) => Self::InvalidTau(t),
            other => Self::Config(other.to_string()),
        }
    }
}
