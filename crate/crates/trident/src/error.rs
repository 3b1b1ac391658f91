use std::path::{Path, PathBuf};

use trident_core::error::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },

    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint {path} was trained with a different model configuration (hash {found}, expected {expected}); pass --force to load it anyway")]
    ConfigHash { path: PathBuf, found: String, expected: String },

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn read(path: &Path, source: std::io::Error) -> Self {
        Error::Read { path: path.to_path_buf(), source }
    }

    pub fn write(path: &Path, source: std::io::Error) -> Self {
        Error::Write { path: path.to_path_buf(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Error::Json { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// 1 for bad input (flags, configs, files, schemas), 2 for failures
    /// while doing the work.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                CoreError::Provider(_)
                | CoreError::Generation { .. }
                | CoreError::NonFiniteLoss { .. }
                | CoreError::NumericalDomain(_) => 2,
                _ => 1,
            },
            Error::Write { .. } => 2,
            Error::Read { .. } | Error::Json { .. } | Error::Format { .. } | Error::ConfigHash { .. } | Error::Usage(_) => 1,
        }
    }
}
