//! Two-process optimisation: discriminator and generator phases, dual learning
//! rates with linear decay, checkpoints and the training loop.

mod checkpoint;
mod config;
mod run;
mod step;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_into, load_model, save_checkpoint, Archive, CheckpointMeta, FORMAT_VERSION,
};
pub use config::{lr_schedule, Ablations, Precision, TrainConfig};
pub use run::{read_loss_log, train, train_on, TrainOutcome, FINAL_CHECKPOINT, LOSS_LOG};
pub use step::{Objective, Phase, TrainState};
