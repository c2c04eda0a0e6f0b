//! Mask-aware optimizers and the training loop.

mod optim;
mod run;

pub use optim::{step, OptimizerKind, OptimizerState};
pub use run::{
    compute_ratios, evaluate, metrics_from_logits, total_parameters, train, EpochRecord, TrainConfig, TrainReport,
    Trainer,
};
