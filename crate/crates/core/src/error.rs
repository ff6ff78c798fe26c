//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate intensity range: lo == hi == {0}")]
    DegenerateRange(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// One-word category used by the CLI for machine-parsable failure lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape",
            Error::Config(_) | Error::DegenerateRange(_) => "config",
            Error::Contract(_) => "contract",
            Error::NonFinite { .. } => "numeric",
            Error::Io { .. } | Error::Corrupt { .. } | Error::Json(_) => "io",
        }
    }
}
