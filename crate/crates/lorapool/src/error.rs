//! Error type shared across the crate.
//!
//! Variants map onto the process exit codes used by the CLI: usage problems
//! exit 1, malformed data exits 2, violated runtime invariants exit 3.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed arguments that cannot be acted on.
    #[error("usage: {0}")]
    Usage(String),

    /// An input file or byte stream does not match its declared format.
    #[error("format: {0}")]
    Format(String),

    /// A runtime invariant did not hold (shape mismatch, non-finite value,
    /// empty input where data is required).
    #[error("invariant: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap a serde_json error with the path it occurred on.
    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Format(_) | Error::Json { .. } => 2,
            Error::Invariant(_) => 3,
            Error::Io { .. } => 2,
        }
    }
}
