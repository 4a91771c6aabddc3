use serde::{Deserialize, Serialize};

use super::records::KeypointSequence;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::SequenceBatch;

/// Coordinates kept per joint after the confidence channel is dropped.
pub const FEATURE_DIM: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Center on the sequence's bounding box and divide by half its larger
    /// side, so every coordinate lands in `[-1, 1]` with aspect preserved.
    #[default]
    Bbox,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(Normalization::Bbox),
            "none" => Ok(Normalization::None),
            other => Err(Error::Config(format!("unknown normalization `{other}` (expected bbox or none)"))),
        }
    }
}

/// A sequence ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub label: usize,
    /// `T × N × 2`, zero on padded frames.
    pub features: Tensor,
    pub mask: Vec<bool>,
}

/// Frame indices kept when `t_raw` frames are reduced to `target_t`:
/// `⌊i · t_raw / target_t⌋`.
pub fn subsample_indices(t_raw: usize, target_t: usize) -> Vec<usize> {
    (0..target_t).map(|i| i * t_raw / target_t).collect()
}

pub fn preprocess(seq: &KeypointSequence, target_t: usize, norm: Normalization) -> Result<PreparedSample> {
    if target_t == 0 {
        return Err(Error::invalid("target sequence length must be at least 1"));
    }
    let t_raw = seq.frames.len();
    let n = seq.n_nodes();
    if t_raw == 0 || n == 0 {
        return Err(Error::Data(format!("sample `{}` is empty", seq.id)));
    }

    let (center, scale) = match norm {
        Normalization::None => ([0.0, 0.0], 1.0),
        Normalization::Bbox => {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for joint in seq.frames.iter().flatten() {
                for k in 0..2 {
                    lo[k] = lo[k].min(joint[k]);
                    hi[k] = hi[k].max(joint[k]);
                }
            }
            let half = (hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0;
            if !(half > 0.0) {
                return Err(Error::Data(format!(
                    "sample `{}`: degenerate bounding box (all joints coincide)",
                    seq.id
                )));
            }
            ([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0], half)
        }
    };

    let kept: Vec<usize> = if t_raw > target_t {
        subsample_indices(t_raw, target_t)
    } else {
        (0..t_raw).collect()
    };
    let mut data = vec![0.0; target_t * n * FEATURE_DIM];
    let mut mask = vec![false; target_t];
    for (t, &src) in kept.iter().enumerate() {
        mask[t] = true;
        for (j, joint) in seq.frames[src].iter().enumerate() {
            let off = (t * n + j) * FEATURE_DIM;
            for k in 0..FEATURE_DIM {
                data[off + k] = (joint[k] - center[k]) / scale;
            }
        }
    }
    Ok(PreparedSample {
        id: seq.id.clone(),
        label: seq.label,
        features: Tensor::new(vec![target_t, n, FEATURE_DIM], data)?,
        mask,
    })
}

pub fn prepare_all(samples: &[KeypointSequence], target_t: usize, norm: Normalization) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| preprocess(s, target_t, norm)).collect()
}

/// Stacks samples of equal shape into a model batch.
pub fn collate(samples: &[&PreparedSample]) -> Result<SequenceBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot collate an empty batch"))?;
    let shape = first.features.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.features.len());
    let mut mask = Vec::with_capacity(samples.len() * shape[0]);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.features.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "collate",
                lhs: shape,
                rhs: s.features.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.features.data());
        mask.extend_from_slice(&s.mask);
        labels.push(s.label);
    }
    let mut batch_shape = vec![samples.len()];
    batch_shape.extend_from_slice(&shape);
    SequenceBatch::new(Tensor::new(batch_shape, data)?, mask, labels)
}
