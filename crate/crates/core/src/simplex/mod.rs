//! Derivative-free search over the probability simplex.

mod mixture;
mod nelder_mead;
mod projection;

pub use mixture::{
    initial_simplex_for_ensemble, optimize_mixture, MixtureError, MixtureSearchResult,
    ScoredWeights, NEAR_VERTEX_EPSILON,
};
pub use nelder_mead::{
    nelder_mead, try_nelder_mead, CoefficientSchedule, Coefficients, IterationRecord, Move,
    NelderMeadConfig, NelderMeadError, NelderMeadOutcome, OptimizationTrace, Termination,
};
pub use projection::project_to_simplex;

use thiserror::Error;

use crate::weight_space::WeightError;

#[derive(Debug, Error)]
pub enum SimplexError {
    #[error("input vector is empty")]
    Empty,
    #[error("entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("bad simplex shape: {0}")]
    Shape(String),
    #[error("initial simplex is degenerate (vertices are affinely dependent)")]
    Degenerate,
    #[error("invalid Nelder-Mead configuration: {0}")]
    Config(String),
    #[error("mixture search needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error(transparent)]
    Weights(#[from] WeightError),
}
