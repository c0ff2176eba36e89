//! Inference, metrics, cost accounting and benchmarking.

pub mod bench;
pub mod cost;
pub mod inference;
pub mod metrics;

pub use bench::{benchmark, median, BenchResult};
pub use cost::{cost_report, count_macs, count_params, CostReport};
pub use inference::{
    argmax_labels, predict_labels, predict_scores, semantic_inference, semantic_scores, sliding_window,
};
pub use metrics::{ConfusionMatrix, IGNORE_INDEX};
