use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GinError>;

#[derive(Debug, Error)]
pub enum GinError {
    #[error("dimension mismatch: {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GinError {
    pub fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        GinError::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GinError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        GinError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GinError::Config(_) | GinError::InvalidArgument(_) => 1,
            GinError::Data(_) | GinError::Parse { .. } | GinError::Io { .. } => 2,
            GinError::Dimension { .. } => 2,
            GinError::Numeric(_) => 3,
        }
    }
}
