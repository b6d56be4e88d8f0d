//! Flat tensor-map checkpoints and their on-disk container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DFWE" | version: u32 | header_len: u64 | header (UTF-8 JSON) | data
//! ```
//!
//! The header lists tensors sorted by name with `offset`/`nbytes` relative to
//! the start of the data section. The data section is the concatenation of
//! every tensor buffer in header order, with no padding. Identical logical
//! content always serializes to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DFWE";
pub const FORMAT_VERSION: u32 = 1;
const PRELUDE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor `{tensor}` contains a non-finite value at element {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("{0}")]
    Incompatible(Mismatch),
}

/// First incompatibility found while validating a set of checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub member: usize,
    pub tensor: String,
    pub kind: MismatchKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MismatchKind {
    /// The tensor exists in member 0 but not in `member`.
    Missing,
    /// `member` has a tensor that member 0 lacks.
    Unexpected,
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    Dtype {
        expected: DType,
        found: DType,
    },
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (m, t) = (self.member, &self.tensor);
        match &self.kind {
            MismatchKind::Missing => write!(f, "member {m} is missing tensor `{t}`"),
            MismatchKind::Unexpected => write!(f, "member {m} has unexpected tensor `{t}`"),
            MismatchKind::Shape { expected, found } => write!(
                f,
                "member {m}, tensor `{t}`: shape conflict, expected {expected:?}, found {found:?}"
            ),
            MismatchKind::Dtype { expected, found } => write!(
                f,
                "member {m}, tensor `{t}`: dtype conflict, expected {expected}, found {found}"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, CheckpointError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CheckpointError::Invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dtype: DType::F32,
            shape,
            data,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Bitwise comparison; unlike `==` this distinguishes `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named parameter tensors plus free-form string metadata.
///
/// Both maps are ordered by key, so iteration order never depends on
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorEntry>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Names must be nonempty and unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: TensorEntry,
    ) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::Invalid("empty tensor name".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::Invalid(format!(
                "duplicate tensor `{name}`"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn with_tensor(
        mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, CheckpointError> {
        self.insert(name, TensorEntry::new(shape, data)?)?;
        Ok(self)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(TensorEntry::len).sum()
    }

    /// Applies `f` elementwise to every tensor, keeping names and shapes.
    pub fn map_elements(&self, mut f: impl FnMut(f32) -> f32) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let data = t.data.iter().map(|&v| f(v)).collect();
                (k.clone(), TensorEntry { data, ..t.clone() })
            })
            .collect();
        Checkpoint {
            tensors,
            meta: self.meta.clone(),
        }
    }

    /// Bitwise equality of all tensors and metadata.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Canonical container bytes. Fails on non-finite elements.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        for (name, t) in &self.tensors {
            if let Some(index) = t.first_non_finite() {
                return Err(CheckpointError::NonFinite {
                    tensor: name.clone(),
                    index,
                });
            }
        }

        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = (t.data.len() * t.dtype.size()) as u64;
                let e = HeaderTensor {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })
        .expect("header serialization is infallible");

        let mut out = Vec::with_capacity(PRELUDE_LEN + header.len() + offset as usize);
        write_prelude(&mut out, MAGIC, &header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses container bytes. The header is fully validated before any
    /// tensor data is decoded. With `verify`, every element is also checked
    /// for finiteness.
    pub fn from_bytes(bytes: &[u8], verify: bool) -> Result<Self, CheckpointError> {
        let header = parse_prelude(bytes, MAGIC)?;
        let header: Header = serde_json::from_slice(header.json)
            .map_err(|e| CheckpointError::Format(format!("bad header json: {e}")))?;
        let data = data_after_header(bytes);

        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.name.is_empty() {
                return Err(CheckpointError::Format("empty tensor name".into()));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    CheckpointError::Corrupt(format!("shape overflow in `{}`", e.name))
                })?;
            let nbytes = count.checked_mul(e.dtype.size()).ok_or_else(|| {
                CheckpointError::Corrupt(format!("size overflow in `{}`", e.name))
            })?;
            if e.nbytes != nbytes as u64 {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor `{}`: header nbytes {} disagrees with shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor `{}`: offset {} where {} was expected",
                    e.name, e.offset, expected_offset
                )));
            }
            expected_offset += e.nbytes;
        }
        if expected_offset != data.len() as u64 {
            return Err(CheckpointError::Corrupt(format!(
                "data section holds {} bytes, header describes {}",
                data.len(),
                expected_offset
            )));
        }
        if header.tensors.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(CheckpointError::Format(
                "tensor names not strictly sorted".into(),
            ));
        }

        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            meta: header.meta,
        };
        for e in header.tensors {
            let raw = &data[e.offset as usize..(e.offset + e.nbytes) as usize];
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let entry = TensorEntry {
                dtype: e.dtype,
                shape: e.shape,
                data: values,
            };
            if verify {
                if let Some(index) = entry.first_non_finite() {
                    return Err(CheckpointError::NonFinite {
                        tensor: e.name,
                        index,
                    });
                }
            }
            ckpt.tensors.insert(e.name, entry);
        }
        Ok(ckpt)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> Result<String, CheckpointError> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `c` to `path` in the container format.
pub fn save(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = c.to_bytes()?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    load_with(path, false)
}

/// Loads and optionally scans every element for non-finite values.
pub fn load_with(path: &Path, verify: bool) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes, verify)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<HeaderTensor>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderTensor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub(crate) struct Prelude<'a> {
    pub json: &'a [u8],
}

/// Checks magic, version and header length of a `magic | u32 | u64 | json`
/// framed file and returns the header slice. Shared with the dataset format.
pub(crate) fn parse_prelude<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
) -> Result<Prelude<'a>, CheckpointError> {
    let n = bytes.len().min(4);
    if bytes[..n] != magic[..n] {
        return Err(CheckpointError::Format("bad magic bytes".into()));
    }
    if bytes.len() < PRELUDE_LEN {
        return Err(CheckpointError::Corrupt(format!(
            "file is {} bytes, shorter than the {PRELUDE_LEN}-byte prelude",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let end = header_len_end(bytes);
    if end > bytes.len() as u128 {
        return Err(CheckpointError::Corrupt(format!(
            "header runs past end of file ({} > {})",
            end,
            bytes.len()
        )));
    }
    Ok(Prelude {
        json: &bytes[PRELUDE_LEN..end as usize],
    })
}

fn header_len_end(bytes: &[u8]) -> u128 {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    PRELUDE_LEN as u128 + len as u128
}

pub(crate) fn write_prelude(out: &mut Vec<u8>, magic: &[u8; 4], header: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
}

/// Only valid after `parse_prelude` succeeded on the same bytes.
pub(crate) fn data_after_header(bytes: &[u8]) -> &[u8] {
    &bytes[header_len_end(bytes) as usize..]
}

/// A validated, ordered collection of pairwise-compatible checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    members: Vec<Checkpoint>,
    labels: Vec<String>,
}

impl CheckpointSet {
    pub fn members(&self) -> &[Checkpoint] {
        &self.members
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Validates that at least two checkpoints share names, shapes and dtypes.
/// Labels default to `member-<i>`.
pub fn check_compatible(members: Vec<Checkpoint>) -> Result<CheckpointSet, CheckpointError> {
    let labels = (0..members.len()).map(|i| format!("member-{i}")).collect();
    check_compatible_labeled(members, labels)
}

pub fn check_compatible_labeled(
    members: Vec<Checkpoint>,
    labels: Vec<String>,
) -> Result<CheckpointSet, CheckpointError> {
    if members.len() < 2 {
        return Err(CheckpointError::Invalid(format!(
            "a checkpoint set needs at least 2 members, got {}",
            members.len()
        )));
    }
    if labels.len() != members.len() {
        return Err(CheckpointError::Invalid(format!(
            "{} labels for {} members",
            labels.len(),
            members.len()
        )));
    }
    let reference = &members[0];
    for (i, m) in members.iter().enumerate().skip(1) {
        if let Some(mismatch) = first_mismatch(reference, m, i) {
            return Err(CheckpointError::Incompatible(mismatch));
        }
    }
    Ok(CheckpointSet { members, labels })
}

pub(crate) fn first_mismatch(
    reference: &Checkpoint,
    other: &Checkpoint,
    member: usize,
) -> Option<Mismatch> {
    for (name, t) in &reference.tensors {
        let Some(o) = other.tensors.get(name) else {
            return Some(Mismatch {
                member,
                tensor: name.clone(),
                kind: MismatchKind::Missing,
            });
        };
        if o.dtype != t.dtype {
            return Some(Mismatch {
                member,
                tensor: name.clone(),
                kind: MismatchKind::Dtype {
                    expected: t.dtype,
                    found: o.dtype,
                },
            });
        }
        if o.shape != t.shape {
            return Some(Mismatch {
                member,
                tensor: name.clone(),
                kind: MismatchKind::Shape {
                    expected: t.shape.clone(),
                    found: o.shape.clone(),
                },
            });
        }
    }
    other
        .tensors
        .keys()
        .find(|k| !reference.tensors.contains_key(*k))
        .map(|k| Mismatch {
            member,
            tensor: k.clone(),
            kind: MismatchKind::Unexpected,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        Checkpoint::new()
            .with_tensor("w", vec![2], vec![1.0, 2.0])
            .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = small()
            .with_tensor("b", vec![1, 2], vec![-0.0, 3.5])
            .unwrap();
        c.set_meta("seed", "7");
        save(&c, &path).unwrap();
        let back = load(&path).unwrap();
        assert!(back.bit_eq(&c));
    }

    #[test]
    fn nan_rejected_with_tensor_name() {
        let c = small().with_tensor("bad", vec![1], vec![f32::NAN]).unwrap();
        match c.to_bytes() {
            Err(CheckpointError::NonFinite { tensor, index }) => {
                assert_eq!(tensor, "bad");
                assert_eq!(index, 0);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn insertion_order_does_not_change_bytes() {
        let mut a = Checkpoint::new();
        a.insert("zeta", TensorEntry::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        a.insert("alpha", TensorEntry::new(vec![2], vec![2.0, 3.0]).unwrap())
            .unwrap();
        a.set_meta("k2", "v2");
        a.set_meta("k1", "v1");
        let mut b = Checkpoint::new();
        b.set_meta("k1", "v1");
        b.insert("alpha", TensorEntry::new(vec![2], vec![2.0, 3.0]).unwrap())
            .unwrap();
        b.set_meta("k2", "v2");
        b.insert("zeta", TensorEntry::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn altered_magic_is_format_error() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, false),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, false),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn one_byte_truncation_is_corruption() {
        let bytes = small().to_bytes().unwrap();
        let r = Checkpoint::from_bytes(&bytes[..bytes.len() - 1], false);
        assert!(matches!(r, Err(CheckpointError::Corrupt(_))), "{r:?}");
    }

    #[test]
    fn truncation_at_every_offset_fails() {
        let c = small()
            .with_tensor("b", vec![3], vec![0.5, 0.25, 8.0])
            .unwrap();
        let bytes = c.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            let r = Checkpoint::from_bytes(&bytes[..cut], false);
            assert!(r.is_err(), "truncation at {cut} was accepted");
        }
        assert!(Checkpoint::from_bytes(&bytes, false).is_ok());
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let mut bytes = small().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, false),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn verify_flag_scans_for_non_finite() {
        // Forge a file containing +inf by patching the data section.
        let mut bytes = small().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes, false).is_ok());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, true),
            Err(CheckpointError::NonFinite { .. })
        ));
    }

    #[test]
    fn shape_mismatch_in_constructor() {
        assert!(TensorEntry::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn duplicate_and_empty_names_rejected() {
        let mut c = small();
        assert!(c
            .insert("w", TensorEntry::new(vec![1], vec![0.0]).unwrap())
            .is_err());
        assert!(c
            .insert("", TensorEntry::new(vec![1], vec![0.0]).unwrap())
            .is_err());
    }

    #[test]
    fn compatible_pair() {
        let set = check_compatible(vec![small(), small()]).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn missing_tensor_cites_member_and_name() {
        let a = small().with_tensor("w2", vec![1], vec![0.0]).unwrap();
        let b = small();
        match check_compatible(vec![a, b]) {
            Err(CheckpointError::Incompatible(m)) => {
                assert_eq!(m.member, 1);
                assert_eq!(m.tensor, "w2");
                assert_eq!(m.kind, MismatchKind::Missing);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transposed_shape_conflict() {
        let a = Checkpoint::new()
            .with_tensor("w", vec![3, 4], vec![0.0; 12])
            .unwrap();
        let b = Checkpoint::new()
            .with_tensor("w", vec![4, 3], vec![0.0; 12])
            .unwrap();
        match check_compatible(vec![a, b]) {
            Err(CheckpointError::Incompatible(m)) => assert_eq!(
                m.kind,
                MismatchKind::Shape {
                    expected: vec![3, 4],
                    found: vec![4, 3]
                }
            ),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_member_set_rejected() {
        assert!(check_compatible(vec![small()]).is_err());
    }
}
