//! Reverse-mode differentiation for the rendering and regression pipelines.
//!
//! A [`Graph`] records operations eagerly over dense [`Tensor`]s; calling
//! [`Graph::backward`] on a one-element output fills the gradients of every
//! leaf. Parameters live in a flat [`ParamSet`] so that optimizer state and
//! checkpoints are single contiguous buffers.

mod adam;
mod check;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use check::{grad_check, grad_check_indices, relative_error};
pub use graph::{ConvGeom, Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("backward needs a one-element output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("shape mismatch in {what}: expected {expected} values, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}
