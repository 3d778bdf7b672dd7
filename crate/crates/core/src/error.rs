use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification of an [`Error`], used by front ends to pick an
/// exit code or an HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The caller passed an argument outside its documented domain.
    InvalidInput,
    /// Data on disk or in memory is missing, corrupt, or inconsistent.
    Data,
    /// A numerical computation failed (non-finite loss and the like).
    Compute,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },

    #[error("{name} = {value} is outside the allowed range {min}-{max}")]
    OutOfRange {
        name: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),

    #[error("corrupt image {path}: {message}")]
    CorruptImage { path: PathBuf, message: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("duplicate image id {0}")]
    DuplicateId(String),

    #[error("unknown image id {0}")]
    UnknownId(String),

    #[error("cluster {0} has no members")]
    EmptyCluster(usize),

    #[error("no prediction for image {0}")]
    MissingPrediction(String),

    #[error("prediction sets disagree on image ids: {0}")]
    IdMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid { .. } | Error::OutOfRange { .. } => ErrorKind::InvalidInput,
            Error::NonFiniteLoss { .. } => ErrorKind::Compute,
            _ => ErrorKind::Data,
        }
    }
}
