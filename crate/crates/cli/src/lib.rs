//! Command-line entry points for training and evaluating learned
//! hyperparameter controllers.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
