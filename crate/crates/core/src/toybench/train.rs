//! Mini-batch Adam training with best-on-dev checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::ToyError;
use crate::checkpoint::Checkpoint;
use crate::evaluation::{evaluate_builtin, LabeledDataset, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub stop_metric: MetricKind,
    /// Epochs without a strict improvement tolerated before stopping.
    pub patience: usize,
    /// Recorded for provenance only; the toy models have no equivalent.
    pub max_input_length: usize,
    /// Recorded for provenance only.
    pub device_batch_size: usize,
    /// Recorded for provenance only; training is always f32/f64.
    pub float16: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 24,
            seed: 0,
            stop_metric: MetricKind::Accuracy,
            patience: 3,
            max_input_length: 512,
            device_batch_size: 8,
            float16: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ToyError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(ToyError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ToyError::Config("batch size must be at least 1".into()));
        }
        if self.float16 {
            return Err(ToyError::Config("half precision is not supported".into()));
        }
        self.stop_metric
            .validate()
            .map_err(|e| ToyError::Config(e.to_string()))
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub stop_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
}

impl TrainOutcome {
    pub fn write_log(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Trains from `init` on the union of `data` (task-pure batches, visited
/// round-robin across datasets). After every epoch the model is scored on
/// `stop_data`; the best-scoring epoch is returned. Training ends after
/// `cfg.epochs` or once `cfg.patience` epochs pass without a strict
/// improvement.
pub fn train(
    init: &Checkpoint,
    data: &[&LabeledDataset],
    cfg: &TrainConfig,
    stop_data: &LabeledDataset,
) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ToyError::Config("no training data".into()));
    }
    let mut net = Mlp::from_checkpoint(init)?;
    let arch = net.architecture().clone();
    for ds in data.iter().copied().chain(std::iter::once(stop_data)) {
        if ds.dim() != arch.input_dim || ds.num_classes() != arch.num_classes {
            return Err(ToyError::Architecture(format!(
                "dataset `{}` ({}) is {}-d with {} classes, model expects {}-d with {} classes",
                ds.task_id(),
                ds.split(),
                ds.dim(),
                ds.num_classes(),
                arch.input_dim,
                arch.num_classes
            )));
        }
    }

    let inputs: Vec<Vec<f64>> = data
        .iter()
        .map(|ds| ds.inputs().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let d = arch.input_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = vec![0.0; net.params().len()];
    let mut v = vec![0.0; net.params().len()];
    let mut step = 0i32;

    let total_rows: usize = data.iter().map(|ds| ds.len()).sum();
    let initial_loss = data
        .iter()
        .zip(&inputs)
        .map(|(ds, x)| net.loss(x, ds.labels()) * ds.len() as f64)
        .sum::<f64>()
        / total_rows as f64;
    let mut log = vec![EpochRecord {
        epoch: 0,
        loss: initial_loss,
        stop_metric: None,
    }];

    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(data, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (b, (ds_index, rows)) in batches.iter().enumerate() {
            let ds = data[*ds_index];
            let x: Vec<f64> = rows
                .iter()
                .flat_map(|&r| inputs[*ds_index][r * d..(r + 1) * d].iter().copied())
                .collect();
            let y: Vec<u32> = rows.iter().map(|&r| ds.labels()[r]).collect();
            let (loss, grad) = net.loss_and_grad(&x, &y);
            if !loss.is_finite() {
                return Err(ToyError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * rows.len() as f64;

            step += 1;
            let a = cfg.adam;
            let bc1 = 1.0 - a.beta1.powi(step);
            let bc2 = 1.0 - a.beta2.powi(step);
            for (((p, g), mi), vi) in net
                .params_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut m)
                .zip(&mut v)
            {
                *mi = a.beta1 * *mi + (1.0 - a.beta1) * g;
                *vi = a.beta2 * *vi + (1.0 - a.beta2) * g * g;
                *p -= cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + a.epsilon);
            }
        }
        if net
            .params()
            .iter()
            .any(|p| !p.is_finite() || p.abs() > f64::from(f32::MAX))
        {
            return Err(ToyError::Diverged {
                epoch,
                batch: batches.len(),
                loss: f64::NAN,
            });
        }

        let ckpt = net.to_checkpoint();
        let score = evaluate_builtin(&ckpt, stop_data, &cfg.stop_metric)?;
        log.push(EpochRecord {
            epoch,
            loss: loss_sum / total_rows as f64,
            stop_metric: Some(score),
        });

        match &best {
            Some((_, s, _)) if score <= *s => since_best += 1,
            _ => {
                best = Some((epoch, score, ckpt));
                since_best = 0;
            }
        }
        if since_best > cfg.patience {
            break;
        }
    }

    let (best_epoch, best_score, mut checkpoint) = best.expect("at least one epoch runs");
    checkpoint.set_meta("train.init_sha256", init.content_hash()?);
    checkpoint.set_meta(
        "train.data",
        data.iter()
            .map(|ds| ds.task_id())
            .collect::<Vec<_>>()
            .join(","),
    );
    checkpoint.set_meta("train.stop_data", stop_data.task_id());
    checkpoint.set_meta("train.seed", cfg.seed.to_string());
    checkpoint.set_meta("train.best_epoch", best_epoch.to_string());
    checkpoint.set_meta("train.learning_rate", cfg.learning_rate.to_string());
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_score,
    })
}

/// Shuffles each dataset, cuts it into batches, and interleaves datasets
/// one batch at a time until all are exhausted.
fn epoch_batches(
    data: &[&LabeledDataset],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<usize>)> {
    let per_dataset: Vec<Vec<Vec<usize>>> = data
        .iter()
        .map(|ds| {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(rng);
            idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let rounds = per_dataset.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (k, batches) in per_dataset.iter().enumerate() {
            if let Some(b) = batches.get(r) {
                out.push((k, b.clone()));
            }
        }
    }
    out
}
