//! Classification metrics. Every score is oriented so that higher is better.

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    MacroF1,
    /// Unweighted mean of plain metrics.
    MeanOf(Vec<MetricKind>),
}

impl MetricKind {
    pub fn validate(&self) -> Result<(), EvalError> {
        if let MetricKind::MeanOf(parts) = self {
            if parts.is_empty() {
                return Err(EvalError::Metric(
                    "mean_of needs at least one metric".into(),
                ));
            }
            if parts.iter().any(|p| matches!(p, MetricKind::MeanOf(_))) {
                return Err(EvalError::Metric("mean_of cannot be nested".into()));
            }
        }
        Ok(())
    }

    pub fn score(
        &self,
        predictions: &[u32],
        labels: &[u32],
        num_classes: usize,
    ) -> Result<f64, EvalError> {
        self.validate()?;
        match self {
            MetricKind::Accuracy => metric_accuracy(predictions, labels),
            MetricKind::MacroF1 => metric_macro_f1(predictions, labels, num_classes),
            MetricKind::MeanOf(parts) => {
                let mut total = 0.0;
                for p in parts {
                    total += p.score(predictions, labels, num_classes)?;
                }
                Ok(total / parts.len() as f64)
            }
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = EvalError;

    /// `accuracy`, `macro_f1`, or `mean_of:accuracy,macro_f1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let plain = |s: &str| match s.trim() {
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            "macro_f1" | "f1" => Ok(MetricKind::MacroF1),
            other => Err(EvalError::Metric(format!("unknown metric `{other}`"))),
        };
        let kind = match s.strip_prefix("mean_of:") {
            Some(rest) => MetricKind::MeanOf(rest.split(',').map(plain).collect::<Result<_, _>>()?),
            None => plain(s)?,
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Accuracy => f.write_str("accuracy"),
            MetricKind::MacroF1 => f.write_str("macro_f1"),
            MetricKind::MeanOf(parts) => {
                f.write_str("mean_of:")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

fn check_lengths(predictions: &[u32], labels: &[u32]) -> Result<(), EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Length {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn metric_accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64, EvalError> {
    check_lengths(predictions, labels)?;
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1.
///
/// A class that appears in neither predictions nor labels is left out of the
/// mean. Any other class with no true positives scores 0. Per-class values
/// are summed in sorted order so relabeling classes cannot change the
/// result, not even in the last bit.
pub fn metric_macro_f1(
    predictions: &[u32],
    labels: &[u32],
    num_classes: usize,
) -> Result<f64, EvalError> {
    check_lengths(predictions, labels)?;
    if let Some(&bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c as usize >= num_classes)
    {
        return Err(EvalError::ClassOutOfRange {
            class: bad,
            num_classes,
        });
    }

    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fnn = vec![0u64; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fnn[l as usize] += 1;
        }
    }

    let mut per_class: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fnn[c] > 0)
        .map(|c| {
            // 2PR / (P + R) written in counts.
            let num = 2 * tp[c];
            let den = 2 * tp[c] + fp[c] + fnn[c];
            num as f64 / den as f64
        })
        .collect();
    per_class.sort_by(f64::total_cmp);
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-class precision and recall, then F1, straight from the definitions.
    fn f1_by_hand(preds: &[u32], labels: &[u32], c: u32) -> Option<f64> {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == c && **l == c)
            .count() as f64;
        let predicted = preds.iter().filter(|p| **p == c).count() as f64;
        let actual = labels.iter().filter(|l| **l == c).count() as f64;
        if predicted == 0.0 && actual == 0.0 {
            return None;
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall == 0.0 {
            Some(0.0)
        } else {
            Some(2.0 * precision * recall / (precision + recall))
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(metric_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(metric_accuracy(&[2, 0, 1], &[2, 0, 1]).unwrap(), 1.0);
        assert_eq!(metric_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(matches!(
            metric_accuracy(&[1], &[0, 0]),
            Err(EvalError::Length { .. })
        ));
        assert!(matches!(metric_accuracy(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn macro_f1_worked_example() {
        let p = [0, 1, 1, 1];
        let l = [0, 0, 1, 1];
        let hand = (f1_by_hand(&p, &l, 0).unwrap() + f1_by_hand(&p, &l, 1).unwrap()) / 2.0;
        assert!((hand - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let got = metric_macro_f1(&p, &l, 2).unwrap();
        assert!((got - hand).abs() < 1e-15, "{got} vs {hand}");
    }

    #[test]
    fn macro_f1_perfect_and_single_class() {
        assert_eq!(metric_macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(metric_macro_f1(&[0, 0], &[0, 0], 1).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_zero_division_convention() {
        // Class 2 absent everywhere: skipped. Class 1 predicted but never a
        // label: contributes 0.
        let got = metric_macro_f1(&[0, 1], &[0, 0], 3).unwrap();
        let class0 = 2.0 * 1.0 / (2.0 + 0.0 + 1.0);
        assert!((got - (class0 + 0.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_rejects_out_of_range() {
        assert!(matches!(
            metric_macro_f1(&[3], &[0], 2),
            Err(EvalError::ClassOutOfRange { class: 3, .. })
        ));
    }

    #[test]
    fn mean_of_and_parsing() {
        let m: MetricKind = "mean_of:accuracy,macro_f1".parse().unwrap();
        let got = m.score(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((got - (0.75 + 0.7333333333333333) / 2.0).abs() < 1e-12);
        assert!(MetricKind::MeanOf(vec![]).validate().is_err());
        assert!(
            MetricKind::MeanOf(vec![MetricKind::MeanOf(vec![MetricKind::Accuracy])])
                .validate()
                .is_err()
        );
        assert!("auc".parse::<MetricKind>().is_err());
        assert_eq!(m.to_string(), "mean_of:accuracy,macro_f1");
        assert_eq!(m.to_string().parse::<MetricKind>().unwrap(), m);
    }

    #[test]
    fn metric_json_shape() {
        assert_eq!(
            serde_json::to_string(&MetricKind::MacroF1).unwrap(),
            "\"macro_f1\""
        );
        let m = MetricKind::MeanOf(vec![MetricKind::Accuracy]);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            "{\"mean_of\":[\"accuracy\"]}"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pairs() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
            (1usize..60).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u32..5, n),
                    proptest::collection::vec(0u32..5, n),
                )
            })
        }

        proptest! {
            #[test]
            fn bounded((p, l) in pairs()) {
                for m in [MetricKind::Accuracy, MetricKind::MacroF1,
                          MetricKind::MeanOf(vec![MetricKind::Accuracy, MetricKind::MacroF1])] {
                    let s = m.score(&p, &l, 5).unwrap();
                    prop_assert!((0.0..=1.0).contains(&s));
                }
            }

            #[test]
            fn matches_hand_oracle((p, l) in pairs()) {
                let per: Vec<f64> = (0..5).filter_map(|c| f1_by_hand(&p, &l, c)).collect();
                let hand = per.iter().sum::<f64>() / per.len() as f64;
                let got = metric_macro_f1(&p, &l, 5).unwrap();
                prop_assert!((got - hand).abs() < 1e-12);
            }

            #[test]
            fn pair_shuffle_invariant((p, l) in pairs(), seed in any::<u64>()) {
                let mut idx: Vec<usize> = (0..p.len()).collect();
                // Deterministic Fisher-Yates driven by the seed.
                let mut s = seed;
                for i in (1..idx.len()).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    idx.swap(i, (s >> 33) as usize % (i + 1));
                }
                let p2: Vec<u32> = idx.iter().map(|&i| p[i]).collect();
                let l2: Vec<u32> = idx.iter().map(|&i| l[i]).collect();
                prop_assert_eq!(metric_accuracy(&p, &l).unwrap(), metric_accuracy(&p2, &l2).unwrap());
                prop_assert_eq!(metric_macro_f1(&p, &l, 5).unwrap(), metric_macro_f1(&p2, &l2, 5).unwrap());
            }

            #[test]
            fn relabel_equivariant((p, l) in pairs(), perm in Just([0u32, 1, 2, 3, 4]).prop_shuffle()) {
                let p2: Vec<u32> = p.iter().map(|&c| perm[c as usize]).collect();
                let l2: Vec<u32> = l.iter().map(|&c| perm[c as usize]).collect();
                prop_assert_eq!(metric_macro_f1(&p, &l, 5).unwrap(), metric_macro_f1(&p2, &l2, 5).unwrap());
            }
        }
    }
}
