use std::path::PathBuf;

/// Errors produced by the analysis engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Model or experiment configuration is inconsistent (shapes, ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied input violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A record file failed validation at a specific line.
    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },

    /// A binary container could not be decoded.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A statistic is undefined for the given data (e.g. single-class labels).
    #[error("undefined statistic: {0}")]
    Undefined(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad error class, used by front-ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Compute,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Validation { .. } => ErrorClass::Validation,
            Error::Undefined(_) | Error::Diverged { .. } => ErrorClass::Compute,
            Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
