use super::SimplexError;
use crate::weight_space::MixtureWeights;

/// Euclidean projection of `v` onto `{w : w >= 0, sum(w) = 1}` by the
/// sort-and-threshold method.
pub fn project_to_simplex(v: &[f64]) -> Result<MixtureWeights, SimplexError> {
    if v.is_empty() {
        return Err(SimplexError::Empty);
    }
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(SimplexError::NonFinite { index, value });
    }

    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    // Largest k such that sorted[k-1] - (sum_{i<k} sorted[i] - 1) / k > 0.
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        }
    }

    let mut w: Vec<f64> = v.iter().map(|&x| (x - threshold).max(0.0)).collect();
    // For large |v| the subtraction leaves a sum error far above the simplex
    // tolerance; a final rescale brings it back to a few ulps.
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    Ok(MixtureWeights::new(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn feasible_point_unchanged() {
        let w = project_to_simplex(&[0.2, 0.3, 0.5]).unwrap();
        assert!(close(w.alphas(), &[0.2, 0.3, 0.5], 1e-12));
    }

    #[test]
    fn equal_entries_shift_to_uniform() {
        let w = project_to_simplex(&[0.2, 0.2, 0.2]).unwrap();
        assert!(close(w.alphas(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn far_point_snaps_to_vertex() {
        let w = project_to_simplex(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.alphas(), &[1.0, 0.0, 0.0]);

        // Coarse grid over the simplex: nothing beats the projection.
        let dist = |p: &[f64]| -> f64 {
            p.iter()
                .zip([2.0, 0.0, 0.0])
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let best = dist(w.alphas());
        let n = 200;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let p = [
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    (n - i - j) as f64 / n as f64,
                ];
                assert!(dist(&p) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn single_entry_is_one() {
        assert_eq!(project_to_simplex(&[-5.0]).unwrap().alphas(), &[1.0]);
    }

    #[test]
    fn large_magnitudes_stay_feasible() {
        let w = project_to_simplex(&[1e8, 1e8 + 0.3, -1e8]).unwrap();
        assert!((w.alphas()[0] - 0.35).abs() < 1e-6);
        assert_eq!(w.alphas()[2], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(project_to_simplex(&[]), Err(SimplexError::Empty)));
        assert!(matches!(
            project_to_simplex(&[0.1, f64::NAN]),
            Err(SimplexError::NonFinite { index: 1, .. })
        ));
        assert!(project_to_simplex(&[f64::INFINITY]).is_err());
    }
}
