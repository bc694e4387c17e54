use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmceError>;

#[derive(Debug, Error)]
pub enum PmceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checksum mismatch in {file}: manifest says {expected}, file hashes to {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("truncated or oversized file {file}: expected {expected} bytes, found {actual}")]
    Truncated {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnknownVersion { found: u32, supported: u32 },

    #[error("non-finite value in {context} at record {index}")]
    NonFinite { context: String, index: usize },

    #[error("class {class_id} ({name}) has no records")]
    EmptyClass { class_id: usize, name: String },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("index {index} out of range (len {len}) in {context}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("stale cache: {0}")]
    StaleCache(String),
}

impl PmceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PmceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PmceError::Json {
            path: path.into(),
            source,
        }
    }
}
