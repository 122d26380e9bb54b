use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the tracker pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its constraint.
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Two tensors or sequences disagree on a size.
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },

    /// Input file content is malformed.
    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Input data is well-formed but unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity reached a place that must stay finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A verification harness found a mismatch.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Verification(_) => 3,
            Error::Dimension { .. }
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::NonFinite(_)
            | Error::Io { .. } => 2,
        }
    }
}
