//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller handed in data that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An internal pipeline state is missing a required piece.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A metric could not be computed because a denominator is zero.
    #[error("metric `{metric}` is undefined: {reason}")]
    UndefinedMetric { metric: String, reason: String },

    /// A file does not follow the expected layout.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Ingestion produced no usable records.
    #[error("empty ingest: {0}")]
    EmptyIngest(String),

    /// A checkpoint does not match the model that tries to load it.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl AsRef<str>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_string(),
            message: message.into(),
        }
    }

    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        1
    }
}
