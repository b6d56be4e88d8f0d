//! Nelder-Mead minimization with dimension-adaptive coefficients.
//!
//! One iteration is one ordering of the simplex followed by one move
//! (reflect, expand, contract or shrink). Objective values that are NaN are
//! replaced by `+inf` so a faulty evaluation can never win.

use std::convert::Infallible;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SimplexError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
}

impl Coefficients {
    pub const CLASSICAL: Coefficients = Coefficients {
        reflection: 1.0,
        expansion: 2.0,
        contraction: 0.5,
        shrink: 0.5,
    };

    /// Gao & Han's dimension-dependent schedule. Falls back to the classical
    /// values below two dimensions, where the schedule degenerates.
    pub fn adaptive(dim: usize) -> Coefficients {
        if dim < 2 {
            return Self::CLASSICAL;
        }
        let n = dim as f64;
        Coefficients {
            reflection: 1.0,
            expansion: 1.0 + 2.0 / n,
            contraction: 0.75 - 1.0 / (2.0 * n),
            shrink: 1.0 - 1.0 / n,
        }
    }

    pub fn validate(&self) -> Result<(), SimplexError> {
        let Coefficients {
            reflection,
            expansion,
            contraction,
            shrink,
        } = *self;
        if !(reflection > 0.0) {
            return Err(SimplexError::Config(format!(
                "reflection {reflection} must be > 0"
            )));
        }
        if !(expansion > reflection.max(1.0)) {
            return Err(SimplexError::Config(format!(
                "expansion {expansion} must exceed max(1, reflection)"
            )));
        }
        if !(contraction > 0.0 && contraction < 1.0) {
            return Err(SimplexError::Config(format!(
                "contraction {contraction} must lie in (0, 1)"
            )));
        }
        if !(shrink > 0.0 && shrink < 1.0) {
            return Err(SimplexError::Config(format!(
                "shrink {shrink} must lie in (0, 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSchedule {
    #[default]
    Adaptive,
    Classical,
    Fixed(Coefficients),
}

impl CoefficientSchedule {
    pub fn resolve(&self, dim: usize) -> Coefficients {
        match self {
            CoefficientSchedule::Adaptive => Coefficients::adaptive(dim),
            CoefficientSchedule::Classical => Coefficients::CLASSICAL,
            CoefficientSchedule::Fixed(c) => *c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadConfig {
    pub coefficients: CoefficientSchedule,
    pub max_iterations: usize,
    pub f_spread_tolerance: f64,
    pub x_spread_tolerance: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            coefficients: CoefficientSchedule::Adaptive,
            max_iterations: 40,
            f_spread_tolerance: 1e-8,
            x_spread_tolerance: 1e-8,
        }
    }
}

impl NelderMeadConfig {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<Coefficients, SimplexError> {
        if self.max_iterations == 0 {
            return Err(SimplexError::Config(
                "max_iterations must be positive".into(),
            ));
        }
        if !(self.f_spread_tolerance >= 0.0) || !(self.x_spread_tolerance >= 0.0) {
            return Err(SimplexError::Config(
                "tolerances must be nonnegative".into(),
            ));
        }
        let c = self.coefficients.resolve(dim);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Move {
    Reflect,
    Expand,
    ContractOutside,
    ContractInside,
    Shrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Budget,
    FConverged,
    XConverged,
    /// The objective failed; the trace covers the work done before that.
    Aborted,
}

/// State of the simplex after one iteration's move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub best: f64,
    pub worst: f64,
    #[serde(rename = "move")]
    pub kind: Move,
    pub evals_so_far: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub initial_best: f64,
    pub records: Vec<IterationRecord>,
    pub evaluations: usize,
    pub termination: Termination,
}

impl OptimizationTrace {
    /// One JSON object per iteration, newline terminated.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadOutcome {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub trace: OptimizationTrace,
}

#[derive(Debug, Error)]
pub enum NelderMeadError<E> {
    #[error(transparent)]
    Setup(#[from] SimplexError),
    #[error("objective failed after {} evaluations: {error}", trace.evaluations)]
    Objective { error: E, trace: OptimizationTrace },
}

pub fn nelder_mead(
    mut objective: impl FnMut(&[f64]) -> f64,
    initial_simplex: &[Vec<f64>],
    config: &NelderMeadConfig,
) -> Result<NelderMeadOutcome, SimplexError> {
    try_nelder_mead(
        |x| Ok::<_, Infallible>(objective(x)),
        initial_simplex,
        config,
    )
    .map_err(|e| match e {
        NelderMeadError::Setup(s) => s,
        NelderMeadError::Objective { error, .. } => match error {},
    })
}

struct Vertex {
    point: Vec<f64>,
    value: f64,
    id: u64,
}

/// Minimizes a fallible objective. An objective error stops the search and
/// is returned together with the trace so far.
pub fn try_nelder_mead<E>(
    mut objective: impl FnMut(&[f64]) -> Result<f64, E>,
    initial_simplex: &[Vec<f64>],
    config: &NelderMeadConfig,
) -> Result<NelderMeadOutcome, NelderMeadError<E>> {
    let dim = check_simplex(initial_simplex)?;
    let coef = config.validate(dim)?;

    let mut evaluations = 0usize;
    let mut next_id = 0u64;
    let mut records = Vec::new();

    macro_rules! eval {
        ($x:expr, $best:expr) => {{
            evaluations += 1;
            match objective($x) {
                Ok(v) if v.is_nan() => f64::INFINITY,
                Ok(v) => v,
                Err(error) => {
                    return Err(NelderMeadError::Objective {
                        error,
                        trace: OptimizationTrace {
                            initial_best: $best,
                            records,
                            evaluations,
                            termination: Termination::Aborted,
                        },
                    })
                }
            }
        }};
    }

    let mut simplex: Vec<Vertex> = Vec::with_capacity(dim + 1);
    for p in initial_simplex {
        let value = eval!(p, f64::INFINITY);
        simplex.push(Vertex {
            point: p.clone(),
            value,
            id: next_id,
        });
        next_id += 1;
    }
    sort(&mut simplex);
    let initial_best = simplex[0].value;

    let termination = loop {
        sort(&mut simplex);
        if records.len() >= config.max_iterations {
            break Termination::Budget;
        }
        let best = simplex[0].value;
        let worst = simplex[dim].value;
        if worst - best < config.f_spread_tolerance {
            break Termination::FConverged;
        }
        let diameter = simplex[1..]
            .iter()
            .map(|v| distance(&v.point, &simplex[0].point))
            .fold(0.0, f64::max);
        if diameter < config.x_spread_tolerance {
            break Termination::XConverged;
        }

        let centroid = centroid(&simplex[..dim]);
        let worst_point = simplex[dim].point.clone();
        let second_worst = simplex[dim - 1].value;

        let x_r = affine(&centroid, &worst_point, -coef.reflection);
        let f_r = eval!(&x_r, initial_best);

        let kind = if f_r < best {
            let x_e = affine(&centroid, &worst_point, -coef.reflection * coef.expansion);
            let f_e = eval!(&x_e, initial_best);
            if f_e < f_r {
                replace_worst(&mut simplex, x_e, f_e, &mut next_id);
                Move::Expand
            } else {
                replace_worst(&mut simplex, x_r, f_r, &mut next_id);
                Move::Reflect
            }
        } else if f_r < second_worst {
            replace_worst(&mut simplex, x_r, f_r, &mut next_id);
            Move::Reflect
        } else {
            let outside = f_r < worst;
            let (x_c, f_c, accepted, kind) = if outside {
                let x_c = affine(&centroid, &worst_point, -coef.reflection * coef.contraction);
                let f_c = eval!(&x_c, initial_best);
                (x_c, f_c, f_c <= f_r, Move::ContractOutside)
            } else {
                let x_c = affine(&centroid, &worst_point, coef.contraction);
                let f_c = eval!(&x_c, initial_best);
                (x_c, f_c, f_c < worst, Move::ContractInside)
            };
            if accepted {
                replace_worst(&mut simplex, x_c, f_c, &mut next_id);
                kind
            } else {
                let anchor = simplex[0].point.clone();
                for v in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = anchor
                        .iter()
                        .zip(&v.point)
                        .map(|(a, x)| a + coef.shrink * (x - a))
                        .collect();
                    v.value = eval!(&p, initial_best);
                    v.point = p;
                    v.id = next_id;
                    next_id += 1;
                }
                Move::Shrink
            }
        };

        sort(&mut simplex);
        records.push(IterationRecord {
            iter: records.len() + 1,
            best: simplex[0].value,
            worst: simplex[dim].value,
            kind,
            evals_so_far: evaluations,
        });
    };

    let best = &simplex[0];
    Ok(NelderMeadOutcome {
        best_point: best.point.clone(),
        best_value: best.value,
        trace: OptimizationTrace {
            initial_best,
            records,
            evaluations,
            termination,
        },
    })
}

/// Validates vertex count, dimensions, finiteness and affine independence.
/// Returns the dimension.
fn check_simplex(simplex: &[Vec<f64>]) -> Result<usize, SimplexError> {
    let Some(first) = simplex.first() else {
        return Err(SimplexError::Shape("no vertices".into()));
    };
    let dim = first.len();
    if dim == 0 {
        return Err(SimplexError::Shape("zero-dimensional vertices".into()));
    }
    if simplex.len() != dim + 1 {
        return Err(SimplexError::Shape(format!(
            "{} vertices in dimension {dim}, expected {}",
            simplex.len(),
            dim + 1
        )));
    }
    for v in simplex {
        if v.len() != dim {
            return Err(SimplexError::Shape(format!(
                "vertex of length {} in dimension {dim}",
                v.len()
            )));
        }
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(SimplexError::NonFinite { index, value });
        }
    }

    // Gaussian elimination on the edge matrix.
    let mut m: Vec<Vec<f64>> = simplex[1..]
        .iter()
        .map(|v| v.iter().zip(first).map(|(a, b)| a - b).collect())
        .collect();
    let scale = m.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 {
        return Err(SimplexError::Degenerate);
    }
    let tol = scale * 1e-10;
    for col in 0..dim {
        let pivot = (col..dim)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        if m[pivot][col].abs() <= tol {
            return Err(SimplexError::Degenerate);
        }
        m.swap(col, pivot);
        for row in (col + 1)..dim {
            let f = m[row][col] / m[col][col];
            for k in col..dim {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    Ok(dim)
}

fn sort(simplex: &mut [Vertex]) {
    simplex.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.id.cmp(&b.id)));
}

fn replace_worst(simplex: &mut [Vertex], point: Vec<f64>, value: f64, next_id: &mut u64) {
    let last = simplex.len() - 1;
    simplex[last] = Vertex {
        point,
        value,
        id: *next_id,
    };
    *next_id += 1;
}

fn centroid(vertices: &[Vertex]) -> Vec<f64> {
    let n = vertices.len() as f64;
    let dim = vertices[0].point.len();
    (0..dim)
        .map(|j| vertices.iter().map(|v| v.point[j]).sum::<f64>() / n)
        .collect()
}

/// `c + t * (w - c)`.
fn affine(c: &[f64], w: &[f64], t: f64) -> Vec<f64> {
    c.iter().zip(w).map(|(ci, wi)| ci + t * (wi - ci)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
