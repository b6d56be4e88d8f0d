//! Run configuration, stored as TOML.
//!
//! Every field can be overridden with a dotted `key=value` assignment, for
//! example `train.learning_rate=0.01` or `family.relatedness=0.5`. Values are
//! parsed as TOML literals and fall back to plain strings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::evaluation::{ExternalEvaluator, MetricKind};
use crate::simplex::NelderMeadConfig;
use crate::toybench::{FamilyConfig, MlpArchitecture, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

/// The shared starting point of every expert and of the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    /// Epochs of warm-up on a pooled task whose labels come from an
    /// independent head. Zero keeps the plain random initialization.
    pub pretrain_epochs: usize,
    pub pretrain_rows: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 0,
            pretrain_rows: 400,
        }
    }
}

/// Which dev split stage-1 experts early-stop on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Every expert stops on the target task's dev metric.
    #[default]
    Target,
    /// Each expert stops on the dev split of its own training tasks.
    OwnTasks,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorMode {
    #[default]
    Builtin,
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    300.0
}

impl EvaluatorMode {
    pub fn external(&self) -> Option<ExternalEvaluator> {
        match self {
            EvaluatorMode::Builtin => None,
            EvaluatorMode::External {
                command,
                timeout_secs,
            } => Some(ExternalEvaluator::new(
                command.clone(),
                Duration::from_secs_f64(*timeout_secs),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; the family, the base model and every training job derive
    /// their seeds from it. `family.seed` and `train.seed` are ignored.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub family: FamilyConfig,
    pub model: ModelConfig,
    pub base: BaseConfig,
    /// Used for stage 1, stage 2 and the baseline alike.
    pub train: TrainConfig,
    pub optimizer: NelderMeadConfig,
    /// Target-task metric that the mixture search maximizes and the test
    /// split is scored with.
    pub metric: MetricKind,
    pub stop_rule: StopRule,
    pub evaluator: EvaluatorMode,
    /// Use at most this many target dev rows.
    pub dev_cap: Option<usize>,
    /// Use at most this many target train rows.
    pub train_cap: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("dfwe-run"),
            family: FamilyConfig::default(),
            model: ModelConfig::default(),
            base: BaseConfig::default(),
            train: toy_train_config(),
            optimizer: NelderMeadConfig::default(),
            metric: MetricKind::Accuracy,
            stop_rule: StopRule::Target,
            evaluator: EvaluatorMode::Builtin,
            dev_cap: None,
            train_cap: None,
        }
    }
}

/// Training settings for the toy benchmark. Optimizer family, batch size,
/// Adam constants and the no-half-precision rule follow the reference
/// setup; step size and epoch budget are scaled to a few hundred rows.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 40,
        patience: 5,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self, PipelineError> {
        let mut doc = toml::Table::try_from(self).expect("config serializes");
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{a}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.family_config().validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        self.architecture()?;
        self.optimizer
            .validate(self.family.n_sources + 2)
            .map_err(|e| cfg(&e))?;
        self.metric.validate().map_err(|e| cfg(&e))?;
        if self.dev_cap == Some(0) || self.train_cap == Some(0) {
            return Err(PipelineError::Config("caps must be positive".into()));
        }
        if let EvaluatorMode::External {
            command,
            timeout_secs,
        } = &self.evaluator
        {
            if command.is_empty() {
                return Err(PipelineError::Config(
                    "external evaluator needs a command".into(),
                ));
            }
            if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                return Err(PipelineError::Config(format!(
                    "evaluator timeout must be positive, got {timeout_secs}"
                )));
            }
        }
        Ok(())
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare_output_dir(&self) -> Result<(), PipelineError> {
        let dir = &self.output_dir;
        let fail = |e: std::io::Error| {
            PipelineError::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        };
        fs::create_dir_all(dir).map_err(fail)?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"").map_err(fail)?;
        fs::remove_file(&probe).map_err(fail)
    }

    pub fn family_config(&self) -> FamilyConfig {
        FamilyConfig {
            seed: derive_seed(self.seed, "family"),
            ..self.family.clone()
        }
    }

    pub fn architecture(&self) -> Result<MlpArchitecture, PipelineError> {
        MlpArchitecture::new(
            self.family.input_dim,
            self.model.hidden.clone(),
            self.family.num_classes,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// The shared training config with a job-specific seed.
    pub fn train_config(&self, job: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, job),
            ..self.train.clone()
        }
    }
}

/// Independent seed for a named job: the first eight bytes of
/// `sha256(master_le || name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), PipelineError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
