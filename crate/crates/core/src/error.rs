use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: missing file")]
    MissingFile { file: String },

    #[error("{file}: malformed npy: {reason}")]
    Npy { file: String, reason: String },

    #[error("{file}: malformed manifest: {reason}")]
    Manifest { file: String, reason: String },

    #[error("{file}: shape mismatch: {reason}")]
    ShapeMismatch { file: String, reason: String },

    #[error("{file}: dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch {
        file: String,
        expected: usize,
        found: usize,
    },

    #[error("{file}: non-finite value at index {index}")]
    NonFinite { file: String, index: usize },

    #[error("{file}: label out of range at index {index}: {value} not in [0, {classes})")]
    LabelOutOfRange {
        file: String,
        index: usize,
        value: i64,
        classes: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance is singular even after ridge escalation (last ridge {ridge:e})")]
    SingularCovariance { ridge: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::MissingFile { .. })
    }
}
