use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PompError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PompError {
    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("degenerate class feature for class {class_id}: {source}")]
    DegenerateClass {
        class_id: usize,
        #[source]
        source: Box<PompError>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("allocation meter still has {live_bytes} live bytes")]
    MeterBusy { live_bytes: u64 },

    #[error("allocation meter not reset: peak {peak_bytes} exceeds live {live_bytes}")]
    MeterNotReset { live_bytes: u64, peak_bytes: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize },

    #[error("digest mismatch: file is corrupted")]
    DigestMismatch,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training aborted at step {step}: {source}")]
    Training {
        step: u64,
        #[source]
        source: Box<PompError>,
    },
}

impl PompError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PompError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PompError::InvalidArgument(msg.into())
    }
}
