//! The spatio-temporal classifier.
//!
//! Per-joint coordinates are embedded to width `H`, passed through `K`
//! residual stages `x ↦ LayerNorm(GRU(GNN(x)) + x)`, pooled over time with
//! learned attention, and classified by a small dense head:
//!
//! ```text
//! B×T×N×d ─embed→ B×T×N×H ─K stages→ B×T×N×H ─pool over T→ B×(N·H) ─head→ B×C
//! ```
//!
//! Training uses one cross-entropy term per sequence.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{GnnKind, ModelConfig};
pub use forward::{
    classify, cross_entropy_loss, embed_input, model_forward, predict, residual_norm_stage, stage_forward,
    temporal_attention_pool, ForwardOutput, FrameSeq, Pooled, Prediction, SequenceBatch, CLASSIFIER_ACTIVATION,
    GAT_ACTIVATION, GCN_ACTIVATION,
};
pub use gradcheck::{
    model_gradcheck, reference_config, GradientFault, ModelGradcheck, ParamCheck, MODEL_GRADCHECK_EPS, MODEL_GRADCHECK_TOL,
};
pub use params::{GnnParams, ModelParams, StageParams};

#[cfg(test)]
mod tests;
