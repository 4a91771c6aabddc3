//! AdamW optimization, the epoch loop and evaluation metrics.

mod metrics;
mod optim;
mod train;

pub use metrics::{f1_score, per_class_metrics, ClassMetrics, EvalReport, SortOrder};
pub use optim::{adamw_step, adamw_step_model, AdamWConfig, AdamWState};
pub use train::{
    evaluate, predict_samples, train, train_step, EpochRecord, LrSchedule, TrainOutputs, TrainPlan, TrainResult,
};
