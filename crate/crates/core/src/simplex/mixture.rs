//! Mixture-weight search: maximize a black-box dev score of the interpolated
//! checkpoint over the probability simplex.
//!
//! Nelder-Mead runs unconstrained in the m-dimensional ambient space and
//! every candidate is projected onto the simplex before evaluation. Since
//! projection absorbs shifts along the all-ones direction, the ambient copy of
//! the uniform start point is lifted along that direction. This makes the
//! ambient start simplex full rank while its projection, and therefore its
//! score, is unchanged.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::nelder_mead::{try_nelder_mead, NelderMeadConfig, NelderMeadError, OptimizationTrace};
use super::{project_to_simplex, SimplexError};
use crate::checkpoint::{Checkpoint, CheckpointSet};
use crate::weight_space::{interpolate, MixtureWeights, WeightError};

/// Mass moved off the dominant coordinate in each near-vertex start point.
pub const NEAR_VERTEX_EPSILON: f64 = 0.05;

/// Offset along the all-ones direction applied to the ambient uniform vertex.
const UNIFORM_LIFT: f64 = NEAR_VERTEX_EPSILON;

/// Objective penalty per unit of ambient distance from the simplex. Without
/// it every point beyond a face scores like its projection, and the simplex
/// collapses onto a flat region and stops early.
const OUTSIDE_PENALTY: f64 = 1.0;

/// Digits kept in memoization keys.
const MEMO_SCALE: f64 = 1e12;

/// The uniform point followed by one near-vertex point per member.
pub fn initial_simplex_for_ensemble(m: usize) -> Result<Vec<MixtureWeights>, SimplexError> {
    if m < 2 {
        return Err(SimplexError::TooFewMembers(m));
    }
    let mut points = vec![MixtureWeights::uniform(m)?];
    let off = NEAR_VERTEX_EPSILON / (m - 1) as f64;
    for i in 0..m {
        let mut p = vec![off; m];
        p[i] = 1.0 - NEAR_VERTEX_EPSILON;
        points.push(project_if_needed(p)?);
    }
    Ok(points)
}

/// Accepts `p` as-is when it already satisfies the simplex tolerance, and
/// projects it otherwise (only reachable through rounding for large `m`).
fn project_if_needed(p: Vec<f64>) -> Result<MixtureWeights, SimplexError> {
    match MixtureWeights::new(p.clone()) {
        Ok(w) => Ok(w),
        Err(WeightError::Sum { .. }) => project_to_simplex(&p),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWeights {
    pub weights: MixtureWeights,
    pub dev_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSearchResult {
    pub best_weights: MixtureWeights,
    pub best_dev_score: f64,
    /// Minimization trace; values are negated dev scores.
    pub trace: OptimizationTrace,
    /// Uniform point first, then the near-vertex points in member order.
    pub initial_vertices: Vec<ScoredWeights>,
    /// Each member alone (one-hot weights), in member order.
    pub member_scores: Vec<f64>,
    /// Distinct calls made to the dev evaluator.
    pub dev_evaluations: usize,
}

#[derive(Debug, Error)]
pub enum MixtureError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Setup(#[from] SimplexError),
    #[error("dev evaluation failed after {} optimizer evaluations: {source}", trace.evaluations)]
    Evaluator {
        #[source]
        source: E,
        trace: Box<OptimizationTrace>,
    },
}

struct Memo {
    entries: HashMap<Vec<i64>, ScoredWeights>,
    calls: usize,
    /// Highest score seen, first in evaluation order on ties.
    best: Option<ScoredWeights>,
}

impl Memo {
    fn key(w: &MixtureWeights) -> Vec<i64> {
        w.alphas()
            .iter()
            .map(|a| (a * MEMO_SCALE).round() as i64)
            .collect()
    }

    fn score<E>(
        &mut self,
        theta: &CheckpointSet,
        w: MixtureWeights,
        dev_eval: &mut impl FnMut(&Checkpoint) -> Result<f64, E>,
    ) -> Result<ScoredWeights, E> {
        let key = Self::key(&w);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        let merged = interpolate(theta, &w).expect("weights sized to the set");
        let dev_score = dev_eval(&merged)?;
        self.calls += 1;
        let entry = ScoredWeights {
            weights: w,
            dev_score,
        };
        if self.best.as_ref().is_none_or(|b| dev_score > b.dev_score) {
            self.best = Some(entry.clone());
        }
        self.entries.insert(key, entry.clone());
        Ok(entry)
    }
}

/// Maximizes `dev_eval(interpolate(theta, project(x)))` with Nelder-Mead,
/// started from [`initial_simplex_for_ensemble`]. Ambient points off the
/// simplex pay a penalty proportional to their distance from it.
///
/// Scores are cached by projected point, so a point is never evaluated
/// twice. Each member alone is scored as well. The result is the best
/// weights ever evaluated, so it never scores below any start point or any
/// single member.
pub fn optimize_mixture<E: std::error::Error + 'static>(
    theta: &CheckpointSet,
    mut dev_eval: impl FnMut(&Checkpoint) -> Result<f64, E>,
    config: &NelderMeadConfig,
) -> Result<MixtureSearchResult, MixtureError<E>> {
    let m = theta.len();
    let start = initial_simplex_for_ensemble(m)?;
    let mut memo = Memo {
        entries: HashMap::new(),
        calls: 0,
        best: None,
    };

    // Seed the cache with the exact start points so the lifted ambient copy
    // of the uniform point resolves to the exact uniform weights.
    let mut initial_vertices = Vec::with_capacity(m + 1);
    for w in &start {
        let scored = memo
            .score(theta, w.clone(), &mut dev_eval)
            .map_err(|source| MixtureError::Evaluator {
                source,
                trace: Box::new(empty_trace()),
            })?;
        initial_vertices.push(scored);
    }

    let mut ambient: Vec<Vec<f64>> = start.iter().map(|w| w.alphas().to_vec()).collect();
    for a in &mut ambient[0] {
        *a += UNIFORM_LIFT;
    }

    let outcome = try_nelder_mead(
        |x| {
            let w = project_to_simplex(x).expect("optimizer points are finite");
            let outside = x
                .iter()
                .zip(w.alphas())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            memo.score(theta, w, &mut dev_eval)
                .map(|s| -s.dev_score + OUTSIDE_PENALTY * outside)
        },
        &ambient,
        config,
    )
    .map_err(|e| match e {
        NelderMeadError::Setup(s) => MixtureError::Setup(s),
        NelderMeadError::Objective { error, trace } => MixtureError::Evaluator {
            source: error,
            trace: Box::new(trace),
        },
    })?;

    let mut member_scores = Vec::with_capacity(m);
    for k in 0..m {
        let w = MixtureWeights::one_hot(m, k).map_err(SimplexError::from)?;
        let scored =
            memo.score(theta, w, &mut dev_eval)
                .map_err(|source| MixtureError::Evaluator {
                    source,
                    trace: Box::new(outcome.trace.clone()),
                })?;
        member_scores.push(scored.dev_score);
    }

    let best = memo.best.take().expect("start points were scored");
    Ok(MixtureSearchResult {
        best_weights: best.weights,
        best_dev_score: best.dev_score,
        trace: outcome.trace,
        initial_vertices,
        member_scores,
        dev_evaluations: memo.calls,
    })
}

fn empty_trace() -> OptimizationTrace {
    OptimizationTrace {
        initial_best: f64::INFINITY,
        records: Vec::new(),
        evaluations: 0,
        termination: super::Termination::Aborted,
    }
}
