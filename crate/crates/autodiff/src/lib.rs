//! A minimal reverse-mode automatic differentiation engine over dense,
//! row-major `f64` matrices.
//!
//! The engine is define-by-run: every forward pass records its primitives on
//! a fresh [`Tape`], and [`Tape::backward`] replays them in reverse to
//! accumulate gradients into the leaves that came from a [`ParameterSet`].
//! It carries exactly the primitives an attention-based actor-critic needs
//! (matrix products, broadcasting adds, concatenation, activations, row
//! softmax, layer normalization and row pooling) and nothing more.

mod check;
mod error;
mod gemm;
mod params;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdSampling};
pub use error::{AutodiffError, Result};
pub use params::{Initializer, ParamGrads, ParamId, ParameterSet};
pub use tape::{NodeId, Op, Tape};
pub use tensor::Tensor;
