//! Keypoint datasets: the line-delimited JSON format, preprocessing into
//! model-ready tensors, the synthetic gesture generator and splitting.

mod preprocess;
mod records;
mod split;
mod synth;

pub use preprocess::{
    collate, prepare_all, preprocess, subsample_indices, Normalization, PreparedSample, FEATURE_DIM,
};
pub use records::{ingest, write, DatasetManifest, KeypointSequence, SplitTag};
pub use split::{split, MIN_STRATIFY_COUNT};
pub use synth::{synthesize, SynthSpec};
