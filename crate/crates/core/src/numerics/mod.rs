//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Everything above this module (model, losses, trainer) is expressed as a
//! sequence of [`Graph`] operations. Correctness of every differentiable
//! operation is established by [`grad_check`] against central differences,
//! not by the mechanism itself.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{ConvGeometry, Gradients, Graph, Var};
pub use real::{Dtype, Real};
pub use tensor::{l2_normalize, matmul, softmax_rows, Normalized, Tensor};

/// Denominator floor used by every L2 normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not match {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("finite-difference step {0} outside [1e-6, 1e-4]")]
    BadStep(f64),
    #[error("output of {0} is not a scalar")]
    NotScalar(&'static str),
}
