//! Dense-array numeric core.
//!
//! A reverse-mode tape over `ndarray` storage with the closed primitive set
//! the model and losses need, seeded RNG utilities, and a finite-difference
//! gradient oracle. Training and evaluation run in `f32`; gradient checks
//! instantiate the same generic code in `f64`, where central differences are
//! trustworthy.

pub mod grad_check;
pub mod rng;
mod tape;

pub use grad_check::{analytic_gradients, fd_compare, grad_check, GradCheckReport};
pub use tape::{NodeId, Tape};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument for {op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

/// Scalar type the tape is generic over.
pub trait Real:
    'static
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
