//! Small reverse-mode autodiff over dense `f64` matrices.
//!
//! A [`Graph`] is a single-owner tape built for one forward/backward pass.
//! Stochastic nodes (dropout, Gaussian reparameterization) take explicit
//! seeds, so a graph is a pure function of its inputs and seeds.

mod graph;
pub mod nn;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId};
pub use nn::{Dense, LayerRecord, Mlp, MlpHandles};
pub use optim::AdamW;
pub use tensor::Tensor;

pub(crate) use graph::softplus;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    RankMismatch { op: &'static str, shape: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}
