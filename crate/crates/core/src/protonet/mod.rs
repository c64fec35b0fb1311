//! The metric-learning core: backbones that embed images, class prototypes
//! as support means, nearest-prototype classification under squared
//! Euclidean distance, and the episode loss.

mod backbone;
mod checkpoint;
mod head;
pub mod layers;

use thiserror::Error;

pub use backbone::{batch_tensor, BackboneKind, Embedder, Network};
pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use head::{
    classify, compute_prototypes, episode_loss, episode_loss_and_grad, sq_distances,
    Classification, HeadOutput, PrototypeSet,
};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {class} has no support rows")]
    MissingClass { class: usize },
    #[error("class {class} has {found} support rows, expected {expected}")]
    UnequalShots {
        class: usize,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {way}-way episode")]
    LabelOutOfRange { label: usize, way: usize },
    #[error("unknown backbone {0:?} (expected conv4 or resnet18)")]
    UnknownBackbone(String),
    #[error("checkpoint is for backbone {found}, expected {expected}")]
    DescriptorMismatch {
        expected: BackboneKind,
        found: BackboneKind,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("weights: {0}")]
    Weights(String),
}
