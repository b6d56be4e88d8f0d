//! Derivative-free weight-space ensembling.
//!
//! Experts are trained from one shared initialization, finetuned on a target
//! task, and merged as a convex combination of their weights. The mixture is
//! chosen by Nelder-Mead search over the probability simplex against a dev
//! metric that need not be differentiable.

pub mod checkpoint;
pub mod evaluation;
pub mod pipeline;
pub mod simplex;
pub mod toybench;
pub mod weight_space;
