//! Finite-difference check of the backpropagation code.

use super::mlp::{Mlp, MlpArchitecture};
use super::ToyError;

/// Central-difference step, in parameter units.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this in magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters skipped because a step flipped some rectifier on or off,
    /// where the loss is not differentiable.
    pub skipped_at_kinks: usize,
    pub analytic: Vec<f64>,
}

/// Compares analytic gradients of a freshly initialized network (seeded by
/// `seed`) against central differences on every parameter.
pub fn gradient_check(
    arch: &MlpArchitecture,
    inputs: &[f64],
    labels: &[u32],
    seed: u64,
) -> Result<GradientCheck, ToyError> {
    let net = arch.init(seed);
    check_network(&net, inputs, labels)
}

pub fn check_network(net: &Mlp, inputs: &[f64], labels: &[u32]) -> Result<GradientCheck, ToyError> {
    let arch = net.architecture();
    let rows = labels.len();
    if rows == 0 || inputs.len() != rows * arch.input_dim {
        return Err(ToyError::Config(format!(
            "{} inputs for {rows} rows of dimension {}",
            inputs.len(),
            arch.input_dim
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= arch.num_classes) {
        return Err(ToyError::Config(format!("label {l} out of range")));
    }

    let (_, analytic) = net.loss_and_grad(inputs, labels);
    let base_pattern = net.activation_pattern(net.params(), inputs, rows);
    let mut params = net.params().to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;

    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let kink_plus = net.activation_pattern(&params, inputs, rows) != base_pattern;
        let up = net.loss_at(&params, inputs, labels);
        params[i] = orig - FD_STEP;
        let kink_minus = net.activation_pattern(&params, inputs, rows) != base_pattern;
        let down = net.loss_at(&params, inputs, labels);
        params[i] = orig;

        if kink_plus || kink_minus {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_err = max_err.max(err);
        checked += 1;
    }
    Ok(GradientCheck {
        max_relative_error: max_err,
        checked,
        skipped_at_kinks: skipped,
        analytic,
    })
}
