//! Contrastive losses, Adam with warmup and cosine decay, and the staged
//! training loop.

mod adam;
mod loss;
mod train;

pub use adam::{adam_step, learning_rate, AdamConfig, AdamState, UpdateRule};
pub use loss::{infonce_loss, siglip_loss, LossConfig, LossKind, LossState, LossValue};
pub use train::{
    batch_gradients, embed_records, holdout_metrics, make_batch, train, EpochLog, Stage, StepLog,
    TrainLog, TrainOutcome, TrainSchedule,
};
