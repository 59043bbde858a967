use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Core(#[from] vid_core::Error),
}

impl CliError {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { pointer: pointer.into(), message: message.into() }
    }

    /// Process exit status: 2 for configuration and usage problems, 3 for
    /// NaN/Inf failures, 4 for missing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(vid_core::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}
