use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown id: {0}")]
    Lookup(String),

    #[error("unknown vocabulary item: {0}")]
    Vocabulary(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorClass::Config,
            Error::Numeric(_) | Error::DegenerateInput(_) | Error::Dimension(_) => {
                ErrorClass::Numeric
            }
            Error::Lookup(_)
            | Error::Vocabulary(_)
            | Error::Format { .. }
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
        }
    }
}
