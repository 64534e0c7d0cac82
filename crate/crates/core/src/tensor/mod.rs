//! Dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//!
//! Parameters live in a [`ParamStore`] outside any graph. A forward pass
//! copies the parameters it needs into a fresh [`Graph`] as differentiable
//! leaves, and [`Graph::backward`] returns a [`Gradients`] map keyed by
//! [`ParamId`]. Graphs are single-use.

mod dense;
pub mod gradcheck;
mod graph;

pub use dense::{Param, ParamId, ParamStore, Tensor};
pub use gradcheck::{gradcheck, relative_error, GradCheckReport, DENOM_FLOOR, FD_STEP};
pub use graph::{Gradients, Graph, Var};

#[cfg(test)]
pub(crate) use graph::softmax_in_place;

use thiserror::Error;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{0}: empty input list")]
    Empty(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("variable belongs to a different graph")]
    ForeignVar,
}
