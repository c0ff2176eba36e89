//! Matching, losses, learning-rate schedule and the optimizer.

pub mod loss;
pub mod matcher;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use loss::{
    dense_ce_loss, mask_class_loss, match_prediction, prediction_loss, GtSegmentation, LossParts, LossWeights,
};
pub use matcher::{assignment_cost, brute_force_assignment, hungarian};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use schedule::{build_lr_schedule, LrSchedule};
pub use trainer::{StepReport, TrainConfig, Trainer};
