//! On-disk layout of a run: datasets, checkpoints and their manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StageError;
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::evaluation::{LabeledDataset, Split};
use crate::toybench::{FamilyConfig, TaskFamily};

/// One persisted checkpoint. `path` is relative to the run directory and
/// uses `/` separators, so manifests from different directories compare
/// equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub label: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub id: String,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
}

impl TaskSplits {
    pub fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Datasets of a family, target first.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySplits {
    pub tasks: Vec<TaskSplits>,
}

impl FamilySplits {
    pub fn target(&self) -> &TaskSplits {
        &self.tasks[0]
    }

    pub fn sources(&self) -> &[TaskSplits] {
        &self.tasks[1..]
    }
}

impl From<&TaskFamily> for FamilySplits {
    fn from(f: &TaskFamily) -> Self {
        Self {
            tasks: f
                .tasks()
                .map(|t| TaskSplits {
                    id: t.id().to_string(),
                    train: t.train.clone(),
                    dev: t.dev.clone(),
                    test: t.test.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FamilyIndex {
    config: Option<FamilyConfig>,
    tasks: Vec<String>,
}

const FAMILY_INDEX: &str = "family.json";
const SPLITS: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

pub(crate) fn dataset_file(id: &str, split: Split) -> String {
    format!("{id}.{split}.ds")
}

/// Writes every split as `<task>.<split>.ds` plus a `family.json` index.
pub fn save_family(
    splits: &FamilySplits,
    config: Option<&FamilyConfig>,
    dir: &Path,
) -> Result<(), StageError> {
    fs::create_dir_all(dir).map_err(|e| StageError::io(dir, e))?;
    for t in &splits.tasks {
        for s in SPLITS {
            t.split(s).save(&dir.join(dataset_file(&t.id, s)))?;
        }
    }
    let index = FamilyIndex {
        config: config.cloned(),
        tasks: splits.tasks.iter().map(|t| t.id.clone()).collect(),
    };
    let path = dir.join(FAMILY_INDEX);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, json).map_err(|e| StageError::io(path, e))
}

pub fn load_family(dir: &Path) -> Result<FamilySplits, StageError> {
    let path = dir.join(FAMILY_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| StageError::io(&path, e))?;
    let index: FamilyIndex = serde_json::from_str(&text).map_err(|e| {
        StageError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        )
    })?;
    if index.tasks.is_empty() {
        return Err(StageError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "family lists no tasks"),
        ));
    }
    let tasks = index
        .tasks
        .into_iter()
        .map(|id| {
            let load = |s| LabeledDataset::load(&dir.join(dataset_file(&id, s)));
            Ok(TaskSplits {
                train: load(Split::Train)?,
                dev: load(Split::Dev)?,
                test: load(Split::Test)?,
                id,
            })
        })
        .collect::<Result<_, StageError>>()?;
    Ok(FamilySplits { tasks })
}

/// Serializes `c` to `root/rel` and records its hash.
pub(crate) fn persist(
    root: &Path,
    rel: &str,
    role: &str,
    label: &str,
    c: &Checkpoint,
) -> Result<ManifestEntry, StageError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StageError::io(parent, e))?;
    }
    let bytes = c.to_bytes()?;
    fs::write(&path, &bytes).map_err(|e| StageError::io(&path, e))?;
    Ok(ManifestEntry {
        role: role.to_string(),
        label: label.to_string(),
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub(crate) fn write_text(root: &Path, rel: &str, text: &[u8]) -> Result<PathBuf, StageError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StageError::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| StageError::io(&path, e))?;
    Ok(path)
}
