use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Neural(#[from] aqtriad_neural::NeuralError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, row: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            row,
            message: message.into(),
        }
    }

    /// Process exit code: 2 argument/config, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Internal(_) => 4,
            Error::Neural(aqtriad_neural::NeuralError::Argument(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
