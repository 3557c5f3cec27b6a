//! Batch-wise contrastive training of a fusion model.
//!
//! Each step embeds a batch of (query image, caption, target image) triplets,
//! scores every composed query against every target in the batch with a learned
//! inverse temperature, and minimizes the query-to-target cross-entropy with Adam.
//! Fusion-block parameters train at a multiple of the base learning rate.

pub mod batches;
pub mod config;
pub mod loss;
pub mod trainer;

pub use batches::{find_duplicate_target, make_batches};
pub use config::{lr_schedule, Regime, Schedule, TrainConfig};
pub use loss::{contrastive_loss, ContrastiveLoss};
pub use trainer::{
    batch_gradients, batch_loss, train, train_sequential, BatchOutcome, StepRecord, TrainLog, TrainingData,
};
