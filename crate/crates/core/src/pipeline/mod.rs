//! End-to-end experiment: baseline finetuning versus the three-stage
//! ensembling arm, with reports.

mod artifacts;
mod config;
mod report;
mod run;

pub use artifacts::{load_family, save_family, FamilySplits, ManifestEntry, TaskSplits};
pub use config::{
    derive_seed, toy_train_config, BaseConfig, EvaluatorMode, ModelConfig, RunConfig, StopRule,
};
pub use report::{
    emit_report, render, BaselineEntry, DevScores, ExpertEntry, Failure, ReportFormat, RunReport,
    RunStatus, SearchSummary, TaskResult, TrainedArtifact, REPORT_SCHEMA_VERSION,
};
pub use run::{
    artifact_path, base_checkpoint, finetune_experts, run_baseline, run_dfwe, train_experts,
    DevEvaluator, ExpertJob,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::evaluation::EvalError;
use crate::simplex::SimplexError;
use crate::toybench::ToyError;
use crate::weight_space::WeightError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Gen,
    Base,
    TrainExperts,
    Finetune,
    Baseline,
    Optimize,
    Evaluate,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Gen => "gen",
            Stage::Base => "base",
            Stage::TrainExperts => "train-experts",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
            Stage::Optimize => "optimize",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

/// What went wrong inside a stage.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StageError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StageError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when an external evaluator broke the request/response contract,
    /// could not be started, failed, or timed out.
    pub fn is_protocol(&self) -> bool {
        let eval = match self {
            StageError::Eval(e) => e,
            StageError::Toy(ToyError::Eval(e)) => e,
            _ => return false,
        };
        matches!(
            eval,
            EvalError::Protocol { .. }
                | EvalError::EvaluatorFailed { .. }
                | EvalError::EvaluatorStatus { .. }
                | EvalError::Spawn { .. }
        )
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    /// The run stopped in `stage`. Everything finished before it is on
    /// disk and listed in `report`.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
        report: Box<RunReport>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 stage failure, 4 evaluator
    /// protocol failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { source, .. } if source.is_protocol() => 4,
            PipelineError::Stage { .. } | PipelineError::Io { .. } => 3,
        }
    }

    pub fn partial_report(&self) -> Option<&RunReport> {
        match self {
            PipelineError::Stage { report, .. } => Some(report),
            _ => None,
        }
    }
}
