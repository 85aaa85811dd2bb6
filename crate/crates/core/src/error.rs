use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input bytes do not match the declared format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Input parses but violates a data invariant (dimensions, finiteness).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("visual token budget exceeded: {total} tokens > budget {budget} (excess {excess})")]
    Budget {
        total: usize,
        budget: usize,
        excess: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("edit error on attribute `{attribute}`: {message}")]
    Edit { attribute: String, message: String },

    #[error("defect label `{0}` matches no manufacturing step")]
    UnmatchedLabel(String),

    #[error("generation error: {0}")]
    Generation(String),

    /// Transport-level failure talking to a generation endpoint; safe to retry.
    #[error("retryable transport error after {attempts} attempt(s): {message}")]
    Retryable { attempts: u32, message: String },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Stable process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Integrity(_) | Error::Json { .. } => 3,
            Error::Argument(_) | Error::Edit { .. } | Error::UnmatchedLabel(_) => 4,
            Error::Budget { .. } => 5,
            Error::Generation(_) | Error::Retryable { .. } => 6,
            Error::Scoring(_) | Error::UndefinedMetric(_) => 7,
            Error::Io { .. } => 8,
        }
    }
}
