//! Dense `f64` tensors and a tape-based reverse-mode differentiator covering
//! exactly the primitives the training objectives need.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Op, L2_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {0} was never recorded; run the forward pass first")]
    NotRecorded(usize),
    #[error("seed gradient shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}
