//! Learned hyperparameter control for population-based optimizers.
//!
//! A transformer policy reads per-individual features of a running PSO or
//! DE population and emits per-individual hyperparameters every generation.
//! The policy is trained with PPO over a seeded suite of shifted and rotated
//! benchmark problems.

pub mod backbone;
pub mod env;
pub mod error;
pub mod harness;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod suite;

pub use error::{GleetError, Result};
