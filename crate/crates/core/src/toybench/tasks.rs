//! Synthetic families of related classification tasks.
//!
//! A fixed random "teacher" maps inputs to features `tanh(W x)`. Each task
//! labels a point by the argmax of its own linear head over those features,
//! where the head is `rho * shared + (1 - rho) * own`, rescaled to unit
//! Frobenius norm. `rho = 1` makes every task identical; `rho = 0` leaves
//! only the input distribution and the teacher features in common.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::argmax;
use super::ToyError;
use crate::evaluation::{LabeledDataset, Split};

pub const TARGET_ID: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, dev: usize, test: usize) -> Self {
        Self { train, dev, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub seed: u64,
    pub n_sources: usize,
    pub relatedness: f64,
    /// Sizes for the target task. The default target is data-poor next to
    /// its sources, with dev and test splits large enough to compare models.
    pub target_sizes: SplitSizes,
    /// Sizes for every source task.
    pub source_sizes: SplitSizes,
    pub input_dim: usize,
    pub num_classes: usize,
    pub teacher_width: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sources: 3,
            relatedness: 0.75,
            target_sizes: SplitSizes::new(100, 200, 1000),
            source_sizes: SplitSizes::new(500, 100, 100),
            input_dim: 16,
            num_classes: 4,
            teacher_width: 24,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(ToyError::Config(format!(
                "relatedness must lie in [0, 1], got {}",
                self.relatedness
            )));
        }
        if self.n_sources == 0 {
            return Err(ToyError::Config("need at least one source task".into()));
        }
        for (what, s) in [("target", self.target_sizes), ("source", self.source_sizes)] {
            if s.train == 0 || s.dev == 0 || s.test == 0 {
                return Err(ToyError::Config(format!(
                    "{what} split sizes must be positive: {s:?}"
                )));
            }
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.teacher_width == 0 {
            return Err(ToyError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub id: String,
    /// `num_classes x teacher_width`, row-major, unit Frobenius norm.
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub descriptor: TaskDescriptor,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
}

impl TaskData {
    pub fn id(&self) -> &str {
        &self.descriptor.id
    }

    pub fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub config: FamilyConfig,
    /// `teacher_width x input_dim`, row-major.
    pub teacher: Vec<f64>,
    pub target: TaskData,
    pub sources: Vec<TaskData>,
}

impl TaskFamily {
    /// Target first, then sources in order.
    pub fn tasks(&self) -> impl Iterator<Item = &TaskData> {
        std::iter::once(&self.target).chain(&self.sources)
    }

    pub fn task(&self, index: usize) -> &TaskData {
        if index == 0 {
            &self.target
        } else {
            &self.sources[index - 1]
        }
    }

    pub fn label_of(&self, head: &[f64], x: &[f32]) -> u32 {
        label_point(&self.teacher, head, &self.config, x)
    }
}

// RNG stream layout: 0 teacher, 1 shared head, 2.. task heads, 1000.. inputs.
const STREAM_TEACHER: u64 = 0;
const STREAM_SHARED_HEAD: u64 = 1;
const STREAM_HEADS: u64 = 2;
const STREAM_INPUTS: u64 = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn label_point(teacher: &[f64], head: &[f64], cfg: &FamilyConfig, x: &[f32]) -> u32 {
    let (d, h) = (cfg.input_dim, cfg.teacher_width);
    let features: Vec<f64> = (0..h)
        .map(|j| {
            teacher[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(w, &xi)| w * f64::from(xi))
                .sum::<f64>()
                .tanh()
        })
        .collect();
    let scores: Vec<f64> = (0..cfg.num_classes)
        .map(|c| {
            head[c * h..(c + 1) * h]
                .iter()
                .zip(&features)
                .map(|(a, f)| a * f)
                .sum()
        })
        .collect();
    argmax(&scores)
}

/// Samples a complete family. The result is a pure function of `cfg`.
pub fn gen_task_family(cfg: &FamilyConfig) -> Result<TaskFamily, ToyError> {
    cfg.validate()?;
    let (d, h, c) = (cfg.input_dim, cfg.teacher_width, cfg.num_classes);
    let teacher = gaussian(
        &mut stream(cfg.seed, STREAM_TEACHER),
        h * d,
        1.0 / (d as f64).sqrt(),
    );
    let shared = normalized(gaussian(
        &mut stream(cfg.seed, STREAM_SHARED_HEAD),
        c * h,
        1.0,
    ));

    let make_task = |index: usize, id: String, sizes: SplitSizes| -> Result<TaskData, ToyError> {
        let own = normalized(gaussian(
            &mut stream(cfg.seed, STREAM_HEADS + index as u64),
            c * h,
            1.0,
        ));
        let rho = cfg.relatedness;
        let head = normalized(
            shared
                .iter()
                .zip(&own)
                .map(|(s, o)| rho * s + (1.0 - rho) * o)
                .collect(),
        );

        // One pool per task, cut into disjoint train/dev/test ranges.
        let total = sizes.train + sizes.dev + sizes.test;
        let mut rng = stream(cfg.seed, STREAM_INPUTS + index as u64);
        let pool: Vec<f32> = (0..total * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        let labels: Vec<u32> = pool
            .chunks_exact(d)
            .map(|x| label_point(&teacher, &head, cfg, x))
            .collect();

        let cut = |split: Split, start: usize, len: usize| {
            LabeledDataset::new(
                id.clone(),
                split,
                d,
                c,
                pool[start * d..(start + len) * d].to_vec(),
                labels[start..start + len].to_vec(),
            )
        };
        Ok(TaskData {
            train: cut(Split::Train, 0, sizes.train)?,
            dev: cut(Split::Dev, sizes.train, sizes.dev)?,
            test: cut(Split::Test, sizes.train + sizes.dev, sizes.test)?,
            descriptor: TaskDescriptor { id, head },
        })
    };

    let target = make_task(0, TARGET_ID.to_string(), cfg.target_sizes)?;
    let sources = (1..=cfg.n_sources)
        .map(|i| make_task(i, format!("source-{i}"), cfg.source_sizes))
        .collect::<Result<_, _>>()?;
    Ok(TaskFamily {
        config: cfg.clone(),
        teacher,
        target,
        sources,
    })
}

/// One stage-1 training set: which tasks (by family index, 0 = target) are
/// pooled into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub label: String,
    pub tasks: Vec<usize>,
}

/// The `n + 2` training sets, in fixed order: target alone, target plus
/// every source, then each source alone.
pub fn build_s_star(family: &TaskFamily) -> Vec<TrainingSpec> {
    s_star(family.sources.len())
}

/// [`build_s_star`] for a family with `n` sources.
pub fn s_star(n: usize) -> Vec<TrainingSpec> {
    let mut specs = vec![
        TrainingSpec {
            label: "target".into(),
            tasks: vec![0],
        },
        TrainingSpec {
            label: "target+sources".into(),
            tasks: (0..=n).collect(),
        },
    ];
    specs.extend((1..=n).map(|i| TrainingSpec {
        label: format!("source-{i}"),
        tasks: vec![i],
    }));
    specs
}
