//! Synthetic related-task benchmark and a from-scratch MLP trainer: the
//! small-scale stand-in for expert language models.

mod gradcheck;
mod mlp;
mod tasks;
mod train;

pub use gradcheck::{check_network, gradient_check, GradientCheck, FD_STEP};
pub(crate) use mlp::argmax;
pub use mlp::{Mlp, MlpArchitecture};
pub use tasks::{
    build_s_star, gen_task_family, s_star, FamilyConfig, SplitSizes, TaskData, TaskDescriptor,
    TaskFamily, TrainingSpec, TARGET_ID,
};
pub use train::{train, AdamConfig, EpochRecord, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::evaluation::EvalError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("training diverged in epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
