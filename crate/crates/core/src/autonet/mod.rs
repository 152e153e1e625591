//! Reverse-mode differentiable kernels for small convolutional networks.
//!
//! A [`Graph`] records each op as it is evaluated; [`Graph::backward`] walks
//! the tape in reverse. Parameters live in a [`ParamStore`] and are copied
//! onto a fresh graph for every step.

mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

use crate::imaging::ImagingError;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Graph, Var};
pub use params::{glorot_uniform, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("relu_pool needs even spatial dims, got {0}x{1}")]
    OddDims(usize, usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {0} is not in {{0, 1}}")]
    InvalidLabel(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}
