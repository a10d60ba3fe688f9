use gleet::GleetError;
use thiserror::Error;

/// Failures split by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<GleetError> for CliError {
    fn from(e: GleetError) -> Self {
        match e {
            GleetError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}
