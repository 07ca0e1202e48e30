use std::path::{Path, PathBuf};

/// Command failure, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Core(roma_core::Error),
    #[error("training diverged: {0}")]
    Divergence(roma_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::File { .. } | Self::Core(_) => 2,
            Self::Divergence(_) => 3,
            Self::Verification(_) => 4,
        }
    }

    pub fn file(path: &Path, message: impl std::fmt::Display) -> Self {
        Self::File {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

impl From<roma_core::Error> for CliError {
    fn from(e: roma_core::Error) -> Self {
        match e {
            roma_core::Error::Divergence { .. } => Self::Divergence(e),
            other => Self::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
