//! Minimal reverse-mode automatic differentiation over dense f64 arrays,
//! with the AdamW optimizer and the `GAVT` checkpoint container.
//!
//! Training runs in 64-bit throughout; checkpoints may downcast individual
//! entries to f32 for inference-only weights. A [`Graph`] is confined to one
//! execution context and parameter tensors are only mutated by the optimizer
//! between steps.

mod checkpoint;
pub mod check;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, Dtype, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use graph::{bilinear_corners, Gradients, Graph, TapeOp, ValueId, NORM_EPS};
pub use optim::{AdamConfig, AdamW, ParamGroup, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {why}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, why: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
