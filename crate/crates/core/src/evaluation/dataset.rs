//! Labeled datasets and their binary container.
//!
//! Framing mirrors the checkpoint container: `"DFWD" | version: u32 |
//! header_len: u64 | JSON header | inputs | labels`, where the header is
//! `{"n", "d", "num_classes", "task_id", "split"}`, inputs are `n * d`
//! little-endian f32 in row-major order and labels are `n` little-endian u32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::checkpoint::{self, CheckpointError};

pub const DATASET_MAGIC: &[u8; 4] = b"DFWD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(EvalError::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    task_id: String,
    split: Split,
    dim: usize,
    num_classes: usize,
    inputs: Vec<f32>,
    labels: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    n: usize,
    d: usize,
    num_classes: usize,
    task_id: String,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        task_id: impl Into<String>,
        split: Split,
        dim: usize,
        num_classes: usize,
        inputs: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self, EvalError> {
        if labels.is_empty() {
            return Err(EvalError::Dataset("dataset needs at least one row".into()));
        }
        if dim == 0 || num_classes == 0 {
            return Err(EvalError::Dataset(
                "input dimension and class count must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * dim {
            return Err(EvalError::Dataset(format!(
                "{} inputs for {} rows of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&class) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(EvalError::ClassOutOfRange { class, num_classes });
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::Dataset("non-finite input value".into()));
        }
        Ok(Self {
            task_id: task_id.into(),
            split,
            dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// First `cap` rows, or the whole dataset when it is smaller.
    pub fn truncated(&self, cap: usize) -> Result<Self, EvalError> {
        let n = cap.min(self.len());
        Self::new(
            self.task_id.clone(),
            self.split,
            self.dim,
            self.num_classes,
            self.inputs[..n * self.dim].to_vec(),
            self.labels[..n].to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&DatasetHeader {
            n: self.len(),
            d: self.dim,
            num_classes: self.num_classes,
            task_id: self.task_id.clone(),
            split: self.split,
        })
        .expect("header serializes");
        let mut out =
            Vec::with_capacity(16 + header.len() + 4 * (self.inputs.len() + self.labels.len()));
        checkpoint::write_prelude(&mut out, DATASET_MAGIC, &header);
        for x in &self.inputs {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EvalError> {
        let prelude = checkpoint::parse_prelude(bytes, DATASET_MAGIC).map_err(|e| match e {
            CheckpointError::Format(m) | CheckpointError::Corrupt(m) => EvalError::Dataset(m),
            other => EvalError::Dataset(other.to_string()),
        })?;
        let h: DatasetHeader = serde_json::from_slice(prelude.json)
            .map_err(|e| EvalError::Dataset(format!("bad header json: {e}")))?;
        let data = checkpoint::data_after_header(bytes);
        let expected =
            h.n.checked_mul(h.d)
                .and_then(|nd| nd.checked_add(h.n))
                .and_then(|k| k.checked_mul(4))
                .ok_or_else(|| EvalError::Dataset("header sizes overflow".into()))?;
        if data.len() != expected {
            return Err(EvalError::Dataset(format!(
                "data section holds {} bytes, header describes {expected}",
                data.len()
            )));
        }
        let (x, y) = data.split_at(h.n * h.d * 4);
        let inputs = x
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = y
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h.task_id, h.split, h.d, h.num_classes, inputs, labels)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_bytes()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = fs::read(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new("t", Split::Dev, 2, 3, vec![0.5, -1.0, 2.0, 0.0], vec![2, 0]).unwrap()
    }

    #[test]
    fn roundtrip() {
        let d = tiny();
        assert_eq!(LabeledDataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn header_fields() {
        let bytes = tiny().to_bytes();
        assert_eq!(&bytes[..4], b"DFWD");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let h: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(h["n"], 2);
        assert_eq!(h["d"], 2);
        assert_eq!(h["num_classes"], 3);
        assert_eq!(h["split"], "dev");
    }

    #[test]
    fn rejects_truncation_and_bad_labels() {
        let bytes = tiny().to_bytes();
        for cut in 0..bytes.len() {
            assert!(LabeledDataset::from_bytes(&bytes[..cut]).is_err());
        }
        assert!(LabeledDataset::new("t", Split::Train, 1, 2, vec![0.0], vec![2]).is_err());
        assert!(LabeledDataset::new("t", Split::Train, 1, 2, vec![], vec![]).is_err());
        assert!(LabeledDataset::new("t", Split::Train, 1, 2, vec![f32::NAN], vec![0]).is_err());
    }

    #[test]
    fn truncated_keeps_prefix() {
        let d = tiny().truncated(1).unwrap();
        assert_eq!(d.labels(), &[2]);
        assert_eq!(d.inputs(), &[0.5, -1.0]);
        assert_eq!(tiny().truncated(10).unwrap().len(), 2);
    }
}
