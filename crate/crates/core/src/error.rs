use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the checkpoint, analysis, mixing and benchmark layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header length: {0}")]
    HeaderLength(String),

    #[error("header is not valid JSON: {0}")]
    HeaderJson(String),

    #[error("malformed header entry `{name}`: {reason}")]
    HeaderEntry { name: String, reason: String },

    #[error("unsupported dtype `{dtype}` for tensor `{name}` (only F32 is supported)")]
    Dtype { name: String, dtype: String },

    #[error("out-of-bounds data range for tensor `{name}`: [{begin}, {end}) exceeds {len} payload bytes")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: u64,
    },

    #[error("overlapping data range for tensor `{name}`")]
    Overlap { name: String },

    #[error("payload bytes [{begin}, {end}) are not covered by any tensor")]
    Gap { begin: u64, end: u64 },

    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("parameter `{name}` out of range: {reason}")]
    OutOfRange { name: &'static str, reason: String },

    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("non-finite gradient with respect to the input")]
    NonFiniteGradient,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("replay mismatch for {path}: expected sha256 {expected}, got {actual}")]
    ReplayMismatch {
        path: String,
        expected: String,
        actual: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn out_of_range(name: &'static str, reason: impl Into<String>) -> Self {
        Error::OutOfRange {
            name,
            reason: reason.into(),
        }
    }
}
