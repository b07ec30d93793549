use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad embedding file header: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: corrupt embedding file: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no improvement over {window} consecutive steps (last loss {last_loss})")]
    NonConvergence {
        window: usize,
        last_loss: f64,
        trace: Vec<f64>,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Csv { source, .. } if source.is_io_error() => ErrorClass::Io,
            Error::Format { .. }
            | Error::Corrupt { .. }
            | Error::Validation(_)
            | Error::DimensionMismatch { .. }
            | Error::Json { .. }
            | Error::Csv { .. }
            | Error::Degenerate(_) => ErrorClass::Validation,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::NonConvergence { .. } => {
                ErrorClass::Numerical
            }
        }
    }
}
