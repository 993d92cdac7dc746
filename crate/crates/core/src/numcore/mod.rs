//! Minimal dense-tensor numeric kernel with reverse-mode automatic
//! differentiation, sufficient for the tokenizer and transformer.
//!
//! Training runs in 32-bit reals; gradient checks instantiate the same
//! generic code at 64-bit. Tensors are immutable values once constructed;
//! a tape is single-writer (one training step builds and consumes one
//! tape). All reductions accumulate in a fixed left-to-right order so
//! single-worker runs are bit-reproducible.

mod gradcheck;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, rel_err, GradCheckReport};
pub use tape::{AttentionSpec, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction and numeric kernels.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for extent {extent} ({context})")]
    IndexOutOfRange {
        context: String,
        index: usize,
        extent: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
