//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records the ops of one forward pass; [`Graph::backward`]
//! replays them in reverse and returns [`Gradients`] that can be folded into a
//! [`ParamStore`]. The engine is generic over [`Real`] so the same model code
//! runs in `f32` for training and `f64` for finite-difference checks.

mod array;
mod gradcheck;
mod graph;
mod ops_basic;
mod ops_conv;
mod ops_rnn;
mod param;
mod rng;
mod scalar;

pub use array::{numel, Tensor};
pub use gradcheck::{grad_check, relative_error, ElementCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops_conv::conv_out_extent;
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use scalar::Real;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible extents {expected:?} and {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    EmptyExtent { shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: range {start}+{len} exceeds extent {extent}")]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
