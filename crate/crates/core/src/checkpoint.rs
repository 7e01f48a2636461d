//! Adapter checkpoints and their on-disk representation.
//!
//! A checkpoint file is laid out as:
//!
//! ```text
//! [0..8)        little-endian u64 header length H
//! [8..8+H)      UTF-8 JSON header
//! [8+H..)       raw little-endian f32 payloads
//! ```
//!
//! The header maps every tensor name to
//! `{"dtype":"F32","shape":[...],"data_offsets":[begin,end]}` (offsets are
//! relative to the start of the payload) and may carry a `__metadata__`
//! object of string to string. The writer always emits the canonical form:
//! metadata first, tensors in lexicographic name order, payloads packed
//! contiguously in the same order with no padding.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fsutil;

/// Reserved header key holding string metadata.
pub const METADATA_KEY: &str = "__metadata__";
/// Metadata key carrying the format revision.
pub const FORMAT_VERSION_KEY: &str = "format_version";
pub const FORMAT_VERSION: &str = "1";
/// Metadata key naming the adapter (used for canonical ordering when mixing).
pub const NAME_KEY: &str = "name";

/// A dense row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the payload length.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = checked_numel(&shape).ok_or_else(|| Error::InvalidTensor {
            name: String::new(),
            reason: format!("shape {shape:?} overflows"),
        })?;
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!(
                    "shape {shape:?} holds {numel} elements but {} values were given",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality of shape and payload (distinguishes `-0.0` from `0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// A named set of adapter tensors plus string metadata.
///
/// Tensors are kept in lexicographic name order; the metadata always carries
/// `format_version = "1"`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Default for AdapterCheckpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl AdapterCheckpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_VERSION_KEY.to_string(), FORMAT_VERSION.to_string());
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    /// Builds a checkpoint from `(name, tensor)` pairs and validates it.
    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut ckpt = Self::new();
        for (name, tensor) in tensors {
            ckpt.insert(name, tensor)?;
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "tensor names must be non-empty".into(),
            });
        }
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor {
                name,
                reason: "name is reserved for metadata".into(),
            });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_names(&self) -> impl ExactSizeIterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// The adapter's name, if recorded in the metadata.
    pub fn name(&self) -> Option<&str> {
        self.metadata.get(NAME_KEY).map(String::as_str)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.set_metadata(NAME_KEY, name);
        self
    }

    /// Same tensor names, shapes and bit patterns. Metadata is ignored.
    pub fn tensors_bitwise_eq(&self, other: &AdapterCheckpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Flat concatenation of every tensor in name order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Checks the checkpoint invariants.
    pub fn validate(&self) -> Result<()> {
        if self.param_count() == 0 {
            return Err(Error::InvalidCheckpoint(
                "checkpoint holds no parameters".into(),
            ));
        }
        match self.metadata.get(FORMAT_VERSION_KEY).map(String::as_str) {
            Some(FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::InvalidCheckpoint(format!(
                    "unsupported format_version `{other}`"
                )))
            }
            None => {
                return Err(Error::InvalidCheckpoint(
                    "metadata lacks format_version".into(),
                ))
            }
        }
        for (name, t) in &self.tensors {
            if checked_numel(&t.shape) != Some(t.data.len()) {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: "shape does not match payload length".into(),
                });
            }
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    /// Canonical serialized form.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = self.header_json()?;
        let payload_len = self.param_count() * 4;
        let mut out = Vec::with_capacity(8 + header.len() + payload_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    fn header_json(&self) -> Result<String> {
        let json = |e: serde_json::Error| Error::HeaderJson(e.to_string());
        let mut header = String::from("{");
        header.push_str(&serde_json::to_string(METADATA_KEY).map_err(json)?);
        header.push(':');
        header.push_str(&serde_json::to_string(&self.metadata).map_err(json)?);
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.numel() * 4;
            header.push(',');
            header.push_str(&serde_json::to_string(name).map_err(json)?);
            header.push_str(":{\"dtype\":\"F32\",\"shape\":");
            header.push_str(&serde_json::to_string(&t.shape).map_err(json)?);
            header.push_str(&format!(",\"data_offsets\":[{offset},{end}]}}"));
            offset = end;
        }
        header.push('}');
        Ok(header)
    }

    /// Parses a checkpoint file image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::HeaderLength(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::HeaderLength(format!(
                "declared header length {header_len} exceeds the {available} bytes after the prefix"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::HeaderJson(format!("header is not UTF-8: {e}")))?;
        let entries: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(header).map_err(|e| Error::HeaderJson(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut ckpt = AdapterCheckpoint::new();
        let mut ranges: Vec<(u64, u64, String)> = Vec::with_capacity(entries.len());
        let mut specs: Vec<(String, Vec<usize>, u64, u64)> = Vec::with_capacity(entries.len());
        for (name, value) in entries {
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> =
                    serde_json::from_value(value).map_err(|e| Error::HeaderEntry {
                        name: METADATA_KEY.into(),
                        reason: e.to_string(),
                    })?;
                ckpt.metadata.extend(meta);
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| Error::HeaderEntry {
                    name: name.clone(),
                    reason: e.to_string(),
                })?;
            if entry.dtype != "F32" {
                return Err(Error::Dtype {
                    name,
                    dtype: entry.dtype,
                });
            }
            let [begin, end] = entry.data_offsets;
            if begin > end {
                return Err(Error::HeaderEntry {
                    name,
                    reason: format!("data_offsets [{begin}, {end}] are reversed"),
                });
            }
            if end > payload.len() as u64 {
                return Err(Error::OutOfBounds {
                    name,
                    begin,
                    end,
                    len: payload.len() as u64,
                });
            }
            let numel = checked_numel(&entry.shape).ok_or_else(|| Error::HeaderEntry {
                name: name.clone(),
                reason: "shape overflows".into(),
            })?;
            if (numel as u64).checked_mul(4) != Some(end - begin) {
                return Err(Error::HeaderEntry {
                    name,
                    reason: format!(
                        "shape {:?} needs {} bytes but data_offsets span {}",
                        entry.shape,
                        numel * 4,
                        end - begin
                    ),
                });
            }
            ranges.push((begin, end, name.clone()));
            specs.push((name, entry.shape, begin, end));
        }

        ranges.sort();
        let mut cursor = 0u64;
        for (begin, end, name) in &ranges {
            if *begin < cursor {
                return Err(Error::Overlap { name: name.clone() });
            }
            if *begin > cursor {
                return Err(Error::Gap {
                    begin: cursor,
                    end: *begin,
                });
            }
            cursor = *end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Gap {
                begin: cursor,
                end: payload.len() as u64,
            });
        }

        for (name, shape, begin, end) in specs {
            let raw = &payload[begin as usize..end as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name, index });
            }
            ckpt.insert(name, Tensor { shape, data })?;
        }
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdapterCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })?;
    AdapterCheckpoint::from_bytes(&bytes)
}

/// Writes the canonical form of `ckpt` to `path` (atomically).
pub fn save_checkpoint(ckpt: &AdapterCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fsutil::write_atomic(path.as_ref(), &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MismatchReason {
    Missing,
    ShapeMismatch,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchReason::Missing => "missing",
            MismatchReason::ShapeMismatch => "shape-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub tensor: String,
    pub reason: MismatchReason,
    /// Index of the checkpoint that lacks the tensor or disagrees on its shape.
    pub checkpoint: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl CompatReport {
    pub fn into_result(self) -> Result<()> {
        match self.mismatches.first() {
            None => Ok(()),
            Some(m) => Err(Error::Incompatible(format!(
                "tensor `{}` {} in checkpoint #{}",
                m.tensor,
                match m.reason {
                    MismatchReason::Missing => "is missing",
                    MismatchReason::ShapeMismatch => "has a different shape",
                },
                m.checkpoint
            ))),
        }
    }
}

/// Checks that all checkpoints share tensor names and per-name shapes.
///
/// Shapes are compared against the first checkpoint that holds the tensor.
pub fn validate_compat<C: Borrow<AdapterCheckpoint>>(ckpts: &[C]) -> CompatReport {
    let names: BTreeSet<&str> = ckpts
        .iter()
        .flat_map(|c| c.borrow().tensor_names())
        .collect();
    let mut mismatches = Vec::new();
    for name in names {
        let mut reference: Option<&[usize]> = None;
        for (i, c) in ckpts.iter().enumerate() {
            match c.borrow().get(name) {
                None => mismatches.push(Mismatch {
                    tensor: name.to_string(),
                    reason: MismatchReason::Missing,
                    checkpoint: i,
                }),
                Some(t) => match reference {
                    None => reference = Some(t.shape()),
                    Some(shape) if shape != t.shape() => mismatches.push(Mismatch {
                        tensor: name.to_string(),
                        reason: MismatchReason::ShapeMismatch,
                        checkpoint: i,
                    }),
                    Some(_) => {}
                },
            }
        }
    }
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
    }
}

/// Shorthand for `validate_compat(ckpts).into_result()`.
pub fn ensure_compatible<C: Borrow<AdapterCheckpoint>>(ckpts: &[C]) -> Result<()> {
    validate_compat(ckpts).into_result()
}
