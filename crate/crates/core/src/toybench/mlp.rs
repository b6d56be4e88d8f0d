//! Small rectifier MLP with hand-written backpropagation.
//!
//! Parameters live in one flat f64 buffer, layer by layer, each layer's
//! weight matrix (`out x in`, row-major) followed by its bias. Checkpoint
//! tensors are named `layers.<i>.weight` and `layers.<i>.bias`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::checkpoint::{Checkpoint, TensorEntry};

/// Output-layer init scale relative to 1/sqrt(fan_in); keeps initial logits
/// near zero so the starting loss sits at ln(C).
const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self, ToyError> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(ToyError::Config(format!(
                "architecture dimensions must be positive: d={input_dim}, hidden={hidden:?}, C={num_classes}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            num_classes,
        })
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layers.{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layers.{layer}.bias")
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// He-normal hidden layers, a down-scaled output layer, zero biases.
    pub fn init(&self, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.layer_dims();
        let mut params = Vec::with_capacity(self.num_params());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let std = if l + 1 == dims.len() {
                OUTPUT_INIT_GAIN / (fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            arch: self.clone(),
            params,
        }
    }

    pub fn zeros(&self) -> Mlp {
        Mlp {
            arch: self.clone(),
            params: vec![0.0; self.num_params()],
        }
    }

    /// Recovers the architecture from tensor names and shapes.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, ToyError> {
        let mut layers = 0;
        while c.get(&Self::weight_name(layers)).is_some() {
            layers += 1;
        }
        if layers == 0 {
            return Err(ToyError::Architecture("no `layers.0.weight` tensor".into()));
        }
        if c.num_tensors() != 2 * layers {
            return Err(ToyError::Architecture(format!(
                "expected {} tensors for {layers} layers, found {}",
                2 * layers,
                c.num_tensors()
            )));
        }
        let mut dims = Vec::with_capacity(layers);
        for l in 0..layers {
            let w = c.get(&Self::weight_name(l)).expect("counted above");
            let b = c.get(&Self::bias_name(l)).ok_or_else(|| {
                ToyError::Architecture(format!("missing `{}`", Self::bias_name(l)))
            })?;
            let &[out, inp] = w.shape() else {
                return Err(ToyError::Architecture(format!(
                    "`{}` has shape {:?}, expected [out, in]",
                    Self::weight_name(l),
                    w.shape()
                )));
            };
            if b.shape() != [out] {
                return Err(ToyError::Architecture(format!(
                    "`{}` has shape {:?}, expected [{out}]",
                    Self::bias_name(l),
                    b.shape()
                )));
            }
            if let Some(&(_, prev_out)) = dims.last() {
                if prev_out != inp {
                    return Err(ToyError::Architecture(format!(
                        "layer {l} takes {inp} inputs but layer {} produces {prev_out}",
                        l - 1
                    )));
                }
            }
            dims.push((inp, out));
        }
        Self::new(
            dims[0].0,
            dims[..layers - 1].iter().map(|d| d.1).collect(),
            dims[layers - 1].1,
        )
    }
}

/// Network parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: MlpArchitecture,
    params: Vec<f64>,
}

/// Per-row intermediate values kept for backpropagation.
struct RowCache {
    /// Inputs to each layer: the row itself, then each hidden activation.
    layer_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Mlp {
    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, ToyError> {
        let arch = MlpArchitecture::from_checkpoint(c)?;
        let mut params = Vec::with_capacity(arch.num_params());
        for l in 0..arch.layer_dims().len() {
            for name in [
                MlpArchitecture::weight_name(l),
                MlpArchitecture::bias_name(l),
            ] {
                let t = c.get(&name).expect("validated by from_checkpoint");
                params.extend(t.data().iter().map(|&v| f64::from(v)));
            }
        }
        Ok(Self { arch, params })
    }

    /// Rounds parameters to f32.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in self.arch.layer_dims().into_iter().enumerate() {
            let w: Vec<f32> = self.params[offset..offset + fan_in * fan_out]
                .iter()
                .map(|&v| v as f32)
                .collect();
            offset += fan_in * fan_out;
            let b: Vec<f32> = self.params[offset..offset + fan_out]
                .iter()
                .map(|&v| v as f32)
                .collect();
            offset += fan_out;
            c.insert(
                MlpArchitecture::weight_name(l),
                TensorEntry::new(vec![fan_out, fan_in], w).expect("shape matches"),
            )
            .expect("unique name");
            c.insert(
                MlpArchitecture::bias_name(l),
                TensorEntry::new(vec![fan_out], b).expect("shape matches"),
            )
            .expect("unique name");
        }
        c
    }

    fn forward_row(&self, params: &[f64], x: &[f64]) -> RowCache {
        let dims = self.arch.layer_dims();
        let mut layer_inputs = Vec::with_capacity(dims.len());
        let mut current = x.to_vec();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &params[offset..offset + fan_in * fan_out];
            let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            if l + 1 < dims.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            layer_inputs.push(std::mem::replace(&mut current, z));
        }
        RowCache {
            layer_inputs,
            logits: current,
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        self.forward_row(&self.params, &x).logits
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict_row(&self, x: &[f32]) -> u32 {
        argmax(&self.logits(x))
    }

    /// Mean cross-entropy over `rows` of the row-major input matrix.
    pub fn loss(&self, inputs: &[f64], labels: &[u32]) -> f64 {
        loss_with(self, &self.params, inputs, labels)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[f64], labels: &[u32]) -> (f64, Vec<f64>) {
        let d = self.arch.input_dim;
        let dims = self.arch.layer_dims();
        let mut grad = vec![0.0; self.params.len()];
        let n = labels.len() as f64;
        let mut total = 0.0;

        // Parameter offset of each layer.
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, &(i, o)| {
                let start = *acc;
                *acc += i * o + o;
                Some(start)
            })
            .collect();

        for (r, &label) in labels.iter().enumerate() {
            let cache = self.forward_row(&self.params, &inputs[r * d..(r + 1) * d]);
            let (row_loss, probs) = softmax_xent(&cache.logits, label);
            total += row_loss;

            // dL/dz for the output layer.
            let mut delta: Vec<f64> = probs;
            delta[label as usize] -= 1.0;
            for v in &mut delta {
                *v /= n;
            }

            for l in (0..dims.len()).rev() {
                let (fan_in, fan_out) = dims[l];
                let input = &cache.layer_inputs[l];
                let off = offsets[l];
                for o in 0..fan_out {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                    for (gw, &a) in row.iter_mut().zip(input) {
                        *gw += g * a;
                    }
                    grad[off + fan_in * fan_out + o] += g;
                }
                if l > 0 {
                    let w = &self.params[off..off + fan_in * fan_out];
                    // `input` is the previous layer's rectified output; its
                    // derivative is 1 where positive.
                    delta = (0..fan_in)
                        .map(|i| {
                            if input[i] > 0.0 {
                                (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        (total / n, grad)
    }

    /// Hidden-unit on/off pattern for every row; used to detect when a
    /// finite-difference step crosses a rectifier kink.
    pub(crate) fn activation_pattern(
        &self,
        params: &[f64],
        inputs: &[f64],
        rows: usize,
    ) -> Vec<bool> {
        let d = self.arch.input_dim;
        let mut pattern = Vec::new();
        for r in 0..rows {
            let cache = self.forward_row(params, &inputs[r * d..(r + 1) * d]);
            for hidden in &cache.layer_inputs[1..] {
                pattern.extend(hidden.iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    pub(crate) fn loss_at(&self, params: &[f64], inputs: &[f64], labels: &[u32]) -> f64 {
        loss_with(self, params, inputs, labels)
    }
}

fn loss_with(net: &Mlp, params: &[f64], inputs: &[f64], labels: &[u32]) -> f64 {
    let d = net.arch.input_dim;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &label)| {
            let cache = net.forward_row(params, &inputs[r * d..(r + 1) * d]);
            softmax_xent(&cache.logits, label).0
        })
        .sum();
    total / labels.len() as f64
}

/// Cross-entropy of one row and the softmax probabilities.
fn softmax_xent(logits: &[f64], label: u32) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label as usize];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

pub(crate) fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_f32_params() {
        let arch = MlpArchitecture::new(3, vec![4, 5], 2).unwrap();
        let net = arch.init(1);
        let ck = net.to_checkpoint();
        let names: Vec<&str> = ck.names().collect();
        assert_eq!(
            names,
            vec![
                "layers.0.bias",
                "layers.0.weight",
                "layers.1.bias",
                "layers.1.weight",
                "layers.2.bias",
                "layers.2.weight"
            ]
        );
        assert_eq!(ck.get("layers.1.weight").unwrap().shape(), &[5, 4]);
        let back = Mlp::from_checkpoint(&ck).unwrap();
        assert_eq!(back.architecture(), &arch);
        assert!(back.to_checkpoint().bit_eq(&ck));
    }

    #[test]
    fn architecture_errors() {
        let ck = Checkpoint::new()
            .with_tensor("w", vec![1], vec![0.0])
            .unwrap();
        assert!(MlpArchitecture::from_checkpoint(&ck).is_err());
        let arch = MlpArchitecture::new(3, vec![4], 2).unwrap();
        let mut ck = arch.init(0).to_checkpoint();
        ck.insert("extra", TensorEntry::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        assert!(MlpArchitecture::from_checkpoint(&ck).is_err());
        assert!(MlpArchitecture::new(0, vec![4], 2).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn initial_loss_near_log_classes() {
        let arch = MlpArchitecture::new(8, vec![32, 32], 5).unwrap();
        let net = arch.init(3);
        let x: Vec<f64> = (0..8 * 50)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let y: Vec<u32> = (0..50).map(|i| i % 5).collect();
        let l = net.loss(&x, &y);
        assert!((l - 5f64.ln()).abs() < 0.1 * 5f64.ln(), "{l}");
    }
}
