//! Adam, plateau scheduling, early stopping, the training loop and
//! checkpoints.

mod adam;
mod checkpoint;
mod scheduler;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, OptimState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use scheduler::{EarlyStop, Plateau, PlateauConfig};
pub use train::{reconstruct, split_811, synthetic_pair, EpochLog, Pair, TrainConfig, TrainOutcome, Trainer, METRICS_CSV_HEADER};
