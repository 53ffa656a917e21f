//! Prediction head, losses, optimizer, training loop and checkpoints.

mod adam;
mod checkpoint;
mod head;
mod loss;
mod model;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use head::{predict_head, PredictHead};
pub use loss::{
    joint_loss, level_weights, risk_level_of, weighted_loss_op, weighted_prediction_loss, weighted_sq_error,
    LossComponents,
};
pub use model::{Model, StepTerms, ViewSource};
pub use trainer::{train, write_history, EpochRecord, TrainOutcome, Trainer, HISTORY_HEADER};
