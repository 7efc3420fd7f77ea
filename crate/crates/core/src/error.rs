use std::path::PathBuf;

use thiserror::Error;

use crate::model::CheckpointError;
use crate::numerics::NumericsError;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("undefined similarity: {0}")]
    Undefined(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config, 3 missing artifact, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Missing(_) => 3,
            LabError::Checkpoint(CheckpointError::Io { .. }) => 3,
            LabError::Numerical(_) => 4,
            _ => 1,
        }
    }
}
