use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VqadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VqadError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data contract violation: {0}")]
    Data(String),

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl VqadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VqadError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        VqadError::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            VqadError::Config(_) | VqadError::Io { .. } | VqadError::Json { .. } => 2,
            VqadError::Shape(_) | VqadError::Data(_) => 3,
            VqadError::Corrupt { .. } => 4,
            VqadError::Reference(_) => 5,
        }
    }
}
