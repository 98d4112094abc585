use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SwordError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("sampler diverged at iteration {iteration}")]
    SamplerDiverged { iteration: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SwordError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SwordError::InvalidArgument(_) | SwordError::Config(_) | SwordError::MissingFile(_) => 2,
            SwordError::TrainingDiverged { .. } | SwordError::SamplerDiverged { .. } => 3,
            SwordError::Io(_) | SwordError::Format(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, SwordError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SwordError {
    SwordError::InvalidArgument(msg.into())
}
