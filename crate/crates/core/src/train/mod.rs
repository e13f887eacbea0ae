//! Optimizer, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
pub use checkpoint::{config_hash, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trainer::{
    evaluate_video, prepare_video, train, video_gradients, video_loss, Dataset, EpochRecord, PaddedClip,
    PreparedVideo, TrainConfig, TrainOutcome,
};
