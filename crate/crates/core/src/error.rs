use gleet_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, GleetError>;

#[derive(Debug, Error)]
pub enum GleetError {
    #[error("evaluation budget exceeded: {used} used + {requested} requested > {max}")]
    BudgetExceeded { used: u64, requested: u64, max: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("result grids differ: {0}")]
    GridMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GleetError {
    pub fn config(msg: impl Into<String>) -> Self {
        GleetError::Config(msg.into())
    }
}
