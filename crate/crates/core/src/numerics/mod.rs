//! Dense `f32` tensors, a differentiation tape, and the neural building
//! blocks shared by every learned component.

mod adam;
mod graph;
mod nn;
mod tensor;

pub use adam::Adam;
pub use graph::{AttnMask, AttnShape, Gradients, Graph, ParamId, ParamSet, Var};
pub use nn::{
    dropout, positional_encoding, timestep_encoding, FeedForward, LayerNorm, Linear, Mode, MultiHeadAttention, LN_EPS,
};
pub use tensor::Tensor;

pub(crate) use nn::find as find_param;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("index {index} out of range for extent {bound}")]
    Index { index: usize, bound: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("degenerate row: {0}")]
    DegenerateRow(String),
    #[error("backward: {0}")]
    Backward(String),
}
