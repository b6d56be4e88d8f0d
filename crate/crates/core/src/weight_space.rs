//! Convex combinations of checkpoints and distances between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError, CheckpointSet, TensorEntry};

/// Absolute slack allowed on `sum(alphas) == 1`.
pub const SIMPLEX_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("mixture weights must be nonempty")]
    Empty,
    #[error("weight {index} is {value}, expected a finite nonnegative value")]
    Negative { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1 within {SIMPLEX_SUM_TOLERANCE:e}")]
    Sum { sum: f64 },
    #[error("{weights} weights for {members} members")]
    Length { weights: usize, members: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A point on the probability simplex: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self, WeightError> {
        if alphas.is_empty() {
            return Err(WeightError::Empty);
        }
        if let Some((index, &value)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !a.is_finite() || **a < 0.0)
        {
            return Err(WeightError::Negative { index, value });
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOLERANCE {
            return Err(WeightError::Sum { sum });
        }
        Ok(Self(alphas))
    }

    pub fn uniform(m: usize) -> Result<Self, WeightError> {
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, k: usize) -> Result<Self, WeightError> {
        let mut a = vec![0.0; m];
        if k >= m {
            return Err(WeightError::Length {
                weights: k + 1,
                members: m,
            });
        }
        a[k] = 1.0;
        Self::new(a)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = WeightError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

/// Builds `sum_i alpha_i * theta_i` for every element of every tensor.
///
/// Each element is accumulated in f64, members in ascending index order, and
/// rounded to f32 once at the end. Output meta carries `merge.labels` and
/// `merge.weights` (both JSON arrays).
pub fn interpolate(theta: &CheckpointSet, a: &MixtureWeights) -> Result<Checkpoint, WeightError> {
    let members = theta.members();
    if a.len() != members.len() {
        return Err(WeightError::Length {
            weights: a.len(),
            members: members.len(),
        });
    }
    let alphas = a.alphas();
    let mut out = Checkpoint::new();
    for (name, first) in members[0].tensors() {
        let sources: Vec<&[f32]> = members
            .iter()
            .map(|m| m.get(name).expect("set is validated").data())
            .collect();
        let data = (0..first.len())
            .map(|j| {
                // -0.0 is the additive identity for every float, and skipping
                // zero weights keeps a one-hot merge bit-identical to its member.
                let mut acc = -0.0f64;
                for (alpha, src) in alphas.iter().zip(&sources) {
                    if *alpha != 0.0 {
                        acc += alpha * f64::from(src[j]);
                    }
                }
                acc as f32
            })
            .collect();
        out.insert(name, TensorEntry::new(first.shape().to_vec(), data)?)?;
    }
    out.set_meta(
        "merge.labels",
        serde_json::to_string(theta.labels()).expect("strings serialize"),
    );
    out.set_meta(
        "merge.weights",
        serde_json::to_string(alphas).expect("finite floats serialize"),
    );
    Ok(out)
}

/// Global L2 distance between two compatible checkpoints, over all
/// parameters concatenated.
pub fn pairwise_distance(c1: &Checkpoint, c2: &Checkpoint) -> Result<f64, WeightError> {
    if let Some(m) = checkpoint::first_mismatch(c1, c2, 1) {
        return Err(CheckpointError::Incompatible(m).into());
    }
    let mut sq = 0.0f64;
    for (name, t1) in c1.tensors() {
        let t2 = c2.get(name).expect("compatibility checked");
        for (&x, &y) in t1.data().iter().zip(t2.data()) {
            let d = f64::from(x) - f64::from(y);
            sq += d * d;
        }
    }
    Ok(sq.sqrt())
}

/// Distances between every pair of members, row-major `m x m`.
pub fn distance_matrix(theta: &CheckpointSet) -> Result<Vec<Vec<f64>>, WeightError> {
    let m = theta.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = pairwise_distance(&theta.members()[i], &theta.members()[j])?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::check_compatible;

    fn ck(v: &[f32]) -> Checkpoint {
        Checkpoint::new()
            .with_tensor("w", vec![v.len()], v.to_vec())
            .unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(MixtureWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            MixtureWeights::new(vec![1.5, -0.5]),
            Err(WeightError::Negative { index: 1, .. })
        ));
        assert!(matches!(
            MixtureWeights::new(vec![0.5, 0.6]),
            Err(WeightError::Sum { .. })
        ));
        assert!(MixtureWeights::new(vec![]).is_err());
        assert!(MixtureWeights::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn midpoint_arithmetic() {
        let set = check_compatible(vec![ck(&[1.0, 2.0]), ck(&[3.0, 6.0])]).unwrap();
        let out = interpolate(&set, &MixtureWeights::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(out.meta()["merge.weights"], "[0.5,0.5]");
    }

    #[test]
    fn one_hot_reproduces_member() {
        let a = ck(&[1.1, -2.7, 1e-30, -0.0]);
        let b = ck(&[9.0, 3.3, -4.4, 0.0]);
        let set = check_compatible(vec![a.clone(), b.clone()]).unwrap();
        let out = interpolate(&set, &MixtureWeights::one_hot(2, 1).unwrap()).unwrap();
        assert!(out.get("w").unwrap().bit_eq(b.get("w").unwrap()));
        let out = interpolate(&set, &MixtureWeights::one_hot(2, 0).unwrap()).unwrap();
        assert!(out.get("w").unwrap().bit_eq(a.get("w").unwrap()));
    }

    #[test]
    fn length_mismatch() {
        let set = check_compatible(vec![ck(&[1.0]), ck(&[2.0])]).unwrap();
        let w = MixtureWeights::uniform(3).unwrap();
        assert!(matches!(
            interpolate(&set, &w),
            Err(WeightError::Length { .. })
        ));
    }

    #[test]
    fn distance_identity_and_triangle() {
        assert_eq!(
            pairwise_distance(&ck(&[1.0, 2.0]), &ck(&[1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            pairwise_distance(&ck(&[0.0, 0.0]), &ck(&[3.0, 4.0])).unwrap(),
            5.0
        );
    }

    #[test]
    fn distance_incompatible() {
        assert!(pairwise_distance(&ck(&[0.0, 0.0]), &ck(&[3.0])).is_err());
    }

    #[test]
    fn weights_serde_validates() {
        let ok: MixtureWeights = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(ok.alphas(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<MixtureWeights>("[0.25,0.25]").is_err());
    }
}
