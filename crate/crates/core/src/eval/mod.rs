//! Synthetic benchmark, metrics, statistics and experiment runners.

pub mod experiment;
pub mod metrics;
pub mod report;
pub mod stats;
pub mod suite;

use thiserror::Error;

use crate::backend::BackendError;
use crate::compose::ComposeError;
use crate::decode::DecodeError;
use crate::optimize::OptimizeError;
use crate::track::TrackError;
use crate::video::VideoError;

pub use experiment::{
    run_ablation, run_experiment, run_grid, run_profile, AblationReport, ExperimentConfig, ExperimentReport,
    GridReport, Method, ProfileReport, SuiteSpec,
};
pub use metrics::{score_run, BootstrapConfig, MetricsReport, PassCounters};
pub use stats::{bootstrap_ci, mcnemar_test, McNemar, McNemarMethod};
pub use suite::{generate_suite, CaseKind, Label, SyntheticCase};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input")]
    EmptyInput,
    #[error("no prediction for case {index}")]
    MissingPrediction { index: usize },
    #[error("report does not match schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
