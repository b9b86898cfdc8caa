//! Synthetic tasks with exact oracles, training, evaluation, gradient
//! checking and the ablation runner.

mod ablate;
mod gradcheck;
mod run;
mod task;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable, SummaryRow, Variant, TABLE_HEADER};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, GroupCheck, GroupStatus, ABS_FLOOR, REL_TOL};
pub use run::RunConfig;
pub use task::{
    gen_dataset, gen_sample, oracle_accuracy, oracle_predict, oracle_verify, Rules, Sample,
    SynthTaskConfig, Target, Violation,
};
pub use train::{
    evaluate, train, EvalReport, MetricRecord, Split, TrainConfig, TrainOutcome, Trainer,
    METRIC_HEADER,
};

use crate::config::ConfigError;
use crate::model::{CheckpointError, ModelError};
use crate::streams::StreamError;

/// Accuracy a model must reach on rule targets of the learnable task.
pub const ACCURACY_BAR: f64 = 0.95;
/// Allowed margin above the 1/vocab chance floor when motion queries are
/// cut off from every key.
pub const CHANCE_MARGIN: f64 = 0.10;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("lag {0} s is not a non-negative multiple of one master-clock frame")]
    LagOffClock(f64),
    #[error("lag {lag} s is longer than the {seconds} s sequence")]
    LagTooLong { lag: f64, seconds: f64 },
    #[error("invalid task: {0}")]
    Task(String),
    #[error("generated data violates the task rules at {0} positions")]
    OracleViolations(usize),
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },
    #[error("ablation needs at least 3 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("unknown ablation variant '{0}'")]
    UnknownVariant(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Stream(#[from] StreamError),
}
