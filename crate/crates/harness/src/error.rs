use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] synmoe_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant breached: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for domain and validation errors, 2 for internal invariant breaches.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Internal(_) | HarnessError::Core(synmoe_core::Error::Oracle(_)) => 2,
            _ => 1,
        }
    }
}
