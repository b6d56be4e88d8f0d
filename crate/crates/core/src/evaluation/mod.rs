//! Turning a checkpoint plus a labeled split into a task score.

mod builtin;
mod dataset;
mod external;
mod metrics;

pub use builtin::{evaluate_builtin, predict};
pub use dataset::{LabeledDataset, Split, DATASET_MAGIC};
pub use external::{evaluate_external, EvalRequest, EvalResponse, EvalStatus, ExternalEvaluator};
pub use metrics::{metric_accuracy, metric_macro_f1, MetricKind};

use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("cannot score an empty set")]
    Empty,
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: u32, num_classes: usize },
    #[error("metric: {0}")]
    Metric(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("evaluator protocol error: {message}; offending line: {line:?}")]
    Protocol { message: String, line: String },
    #[error("evaluator exited with {status}; stderr: {stderr}")]
    EvaluatorFailed { status: String, stderr: String },
    #[error("evaluator reported status {status:?}: {message}")]
    EvaluatorStatus { status: EvalStatus, message: String },
    #[error("could not run evaluator `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
}
