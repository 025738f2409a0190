//! Two-branch IR-guided HDR reconstruction.
//!
//! The thermal branch is a U-Net trained to translate IR frames into RGB,
//! which forces its encoder to keep only visually relevant thermal features.
//! Its input layer and first three downsampling modules are then frozen and
//! fused into the HDR branch: before every downsampling module the HDR
//! encoder concatenates its own features with the matching-resolution frozen
//! IR features. The decoder sees HDR-branch features only, so modality
//! differences stay in the shallow layers.
//!
//! Training is two-stage (IR-to-RGB first, then the HDR branch with pixel,
//! perceptual, and adversarial terms); ablation variants cover no-IR,
//! pixel-level fusion (IR as a fourth input channel), and jointly trained
//! fusion without freezing.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod loss;
pub mod model;
pub mod train;

pub use ablation::{run_ablation, run_sweep, AblationKind, AblationRow, SweepRow};
pub use config::{NetConfig, TrainConfig};
pub use dataset::{Sample, TensorDataset};
pub use model::{Discriminator, HdrtModel, PerceptualExtractor, UNet, UNetSpec};
pub use train::{train_hdr_branch, train_ir_branch, HdrTrainOutcome, IrTrainOutcome};

/// Errors raised by model assembly, training, and inference.
#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Nn(#[from] nncore::NnError),
    #[error(transparent)]
    Data(#[from] irhdr_core::data::DataError),
    #[error(transparent)]
    Metric(#[from] irhdr_core::metrics::MetricError),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {loss}")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("input size mismatch: {0}")]
    InputMismatch(String),
    #[error("variant {variant} {reason}")]
    WrongArity {
        variant: &'static str,
        reason: &'static str,
    },
    #[error("frozen prefix changed during training")]
    FrozenPrefixViolated,
    #[error("i/o: {0}")]
    Io(String),
}
