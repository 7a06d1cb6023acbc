//! Training loop for every mode: clean, adversarial, and feature-aligned
//! fine-tuning with optional auxiliary normalization.

mod config;
mod fit;
mod sgd;
mod step;

pub use config::{Mode, TrainConfig};
pub use fit::{config_hash, epoch_order, fit, iterations_per_epoch, FitOptions, FitOutcome};
pub(crate) use fit::mix;
pub use sgd::Sgd;
pub use step::{total_loss, LossTerms, TrainLogRecord, Trainer};
