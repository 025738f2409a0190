//! Minimal reverse-mode automatic differentiation for convolutional nets.
//!
//! A [`Graph`] is a per-step tape: leaves are inserted from raw buffers,
//! operators append nodes, and [`Graph::backward`] walks the tape in reverse
//! filling gradients of tracked leaves. Parameters live outside the graph in
//! a [`ParamStore`] and are re-inserted as leaves every step, which keeps
//! ownership simple and training deterministic.
//!
//! Compute is generic over [`Scalar`]: training runs in `f32`, gradient
//! verification against central finite differences runs the same code in
//! `f64`. Convolutions lower to GEMM through im2col.

mod checkpoint;
mod conv;
mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use graph::{Graph, VarId};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, Param, ParamStore};
pub use scalar::Scalar;

/// Errors surfaced by graph construction, backprop, and optimization.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch on concat: {0}")]
    ConcatMismatch(String),
    #[error("backward through an untracked tensor")]
    Untracked,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cosine similarity undefined for zero-norm input")]
    ZeroNorm,
    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
