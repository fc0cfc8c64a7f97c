//! The classifiers being multiplexed: declarative architectures, FLOPs
//! accounting, projection heads and `MUXC` checkpoints.

mod arch;
mod checkpoint;
mod model;
mod stack;

pub use arch::{Architecture, LayerSpec, ResolvedLayer};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointDescriptor, TrainingMetadata, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{count_flops, ClassifierModel, CostedModel, ForwardVars, Inference, ProjectionHead, CLASSIFIER_KIND};
pub use stack::LayerStack;
