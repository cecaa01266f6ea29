//! DiceBCE loss, Adam, and the epoch loop.

mod adam;
mod log;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use log::{read_epoch_log, write_epoch_log, EpochLog};
pub use loss::{bce_loss, dice_bce_loss, dice_bce_on_tape, dice_loss, LossConfig};
pub use trainer::{steps_per_epoch, train, Sample, TrainConfig, TrainOptions, TrainOutcome};
