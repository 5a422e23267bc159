//! Minimal differentiable-array engine.
//!
//! Exactly the operations the diffusion model needs: dense tensors, a
//! reverse-mode tape ([`Graph`]), an Adam optimizer, and a binary
//! checkpoint format. Forward values are computed eagerly; every op
//! records enough context to run the backward pass once, in reverse
//! tape order.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file};
pub use graph::{Graph, NodeId};
pub use kernels::sigmoid;
pub use optim::AdamState;
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;

/// Scalar type used throughout the engine. Double precision by default;
/// the `single-precision` build switch narrows training to `f32`.
#[cfg(feature = "single-precision")]
pub type Real = f32;
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("tensor data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {reason}")]
    Config { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("backward already consumed this tape")]
    TapeConsumed,
    #[error("non-finite gradient for parameter \"{param}\"")]
    NonFiniteGrad { param: String },
}
