use rand::Rng;

use super::config::ModelConfig;
use super::params::{GnnParams, ModelParams, StageParams};
use crate::diffcore::{softmax_in_place, Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphnet::{gat_forward, gcn_forward, GraphContext};
use crate::recurrent::{gru_cell_step, HiddenState};

/// Activation after the attention layer of each stage.
pub const GAT_ACTIVATION: Activation = Activation::Elu;
/// Activation after the convolution layer of each stage.
pub const GCN_ACTIVATION: Activation = Activation::Relu;
/// Activation inside the classifier head.
pub const CLASSIFIER_ACTIVATION: Activation = Activation::Relu;

/// A batch of fixed-length keypoint sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `B×T×N×d`, zero at padded frames.
    pub features: Tensor,
    /// `B·T` flags, sample-major; `true` marks a real frame.
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(features: Tensor, mask: Vec<bool>, labels: Vec<usize>) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("batch features must be B×T×N×d, got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[1]);
        if mask.len() != b * t || labels.len() != b {
            return Err(Error::Shape {
                op: "sequence_batch",
                lhs: shape.to_vec(),
                rhs: vec![mask.len(), labels.len()],
            });
        }
        for (i, frames) in mask.chunks(t).enumerate() {
            if !frames.iter().any(|&m| m) {
                return Err(Error::Data(format!("sample {i} of the batch has no unmasked frame")));
            }
        }
        Ok(SequenceBatch {
            features,
            mask,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn n_nodes(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[3]
    }

    /// Frame `t` of every sample as a `(B·N)×d` matrix.
    fn frame(&self, t: usize) -> Tensor {
        let (b, tt, n, d) = (self.batch_size(), self.seq_len(), self.n_nodes(), self.input_dim());
        let src = self.features.data();
        let mut out = Vec::with_capacity(b * n * d);
        for s in 0..b {
            let off = (s * tt + t) * n * d;
            out.extend_from_slice(&src[off..off + n * d]);
        }
        Tensor::new(vec![b * n, d], out).expect("frame shape")
    }
}

/// A `B×T×N×W` activation kept on the tape as one `(B·N)×W` matrix per frame.
#[derive(Clone, Debug)]
pub struct FrameSeq {
    pub frames: Vec<Var>,
    pub batch: usize,
    pub n_nodes: usize,
}

impl FrameSeq {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Gathers the frames into a `B×T×N×W` tensor.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        let (b, n, t) = (self.batch, self.n_nodes, self.frames.len());
        let w = tape.shape(self.frames[0])[1];
        let mut out = Tensor::zeros(vec![b, t, n, w]);
        for (ti, &f) in self.frames.iter().enumerate() {
            let src = tape.value(f).data();
            for s in 0..b {
                let dst = ((s * t + ti) * n) * w;
                out.data_mut()[dst..dst + n * w].copy_from_slice(&src[s * n * w..(s + 1) * n * w]);
            }
        }
        out
    }
}

/// Per-joint linear map `x W + b` applied to every sample, frame and node.
pub fn embed_input(tape: &mut Tape, params: &ModelParams<Var>, batch: &SequenceBatch) -> Result<FrameSeq> {
    let mut frames = Vec::with_capacity(batch.seq_len());
    for t in 0..batch.seq_len() {
        let x = tape.constant(batch.frame(t));
        let h = tape.matmul(x, params.embed_w)?;
        frames.push(tape.add_bias(h, params.embed_b)?);
    }
    Ok(FrameSeq {
        frames,
        batch: batch.batch_size(),
        n_nodes: batch.n_nodes(),
    })
}

/// Spatial layer on every frame independently, then a GRU unrolled over
/// time separately for each (sample, node) with weights shared across nodes.
///
/// At a masked frame the GRU state of that sample is carried over unchanged,
/// so padded frames never reach the state seen by later real frames.
pub fn stage_forward(
    tape: &mut Tape,
    stage: &StageParams<Var>,
    input: &FrameSeq,
    graph: &GraphContext,
    mask: &[bool],
) -> Result<FrameSeq> {
    if input.n_nodes != graph.n_nodes() {
        return Err(Error::Shape {
            op: "stage_forward",
            lhs: vec![input.n_nodes],
            rhs: vec![graph.n_nodes()],
        });
    }
    let (b, t_len) = (input.batch, input.len());
    if mask.len() != b * t_len {
        return Err(Error::Shape {
            op: "stage_forward",
            lhs: vec![b, t_len],
            rhs: vec![mask.len()],
        });
    }
    let rows = b * input.n_nodes;
    let mut frames = Vec::with_capacity(t_len);
    let mut h: Option<Var> = None;
    for (t, &x) in input.frames.iter().enumerate() {
        let s = match &stage.gnn {
            GnnParams::Gcn { weight } => gcn_forward(tape, &graph.adjacency, x, *weight, GCN_ACTIVATION)?,
            GnnParams::Gat(p) => gat_forward(tape, p, x, graph, GAT_ACTIVATION)?,
        };
        let width = tape.shape(s)[1];
        let h_prev = match h {
            Some(v) => v,
            None => HiddenState::zeros(tape, rows, width, false).h,
        };
        let mut h_new = gru_cell_step(tape, &stage.gru, h_prev, s)?;
        if (0..b).any(|i| !mask[i * t_len + t]) {
            let mut keep = Vec::with_capacity(rows * width);
            for i in 0..b {
                let m = if mask[i * t_len + t] { 1.0 } else { 0.0 };
                keep.extend(std::iter::repeat_n(m, input.n_nodes * width));
            }
            let keep = tape.constant(Tensor::new(vec![rows, width], keep)?);
            let carry = tape.one_minus(keep)?;
            let fresh = tape.mul(keep, h_new)?;
            let old = tape.mul(carry, h_prev)?;
            h_new = tape.add(fresh, old)?;
        }
        frames.push(h_new);
        h = Some(h_new);
    }
    Ok(FrameSeq {
        frames,
        batch: input.batch,
        n_nodes: input.n_nodes,
    })
}

/// `LayerNorm(stage(x) + x)` over the feature axis of every node and frame.
pub fn residual_norm_stage(
    tape: &mut Tape,
    stage: &StageParams<Var>,
    input: &FrameSeq,
    graph: &GraphContext,
    mask: &[bool],
    eps: f64,
) -> Result<FrameSeq> {
    let block = stage_forward(tape, stage, input, graph, mask)?;
    let mut frames = Vec::with_capacity(input.len());
    for (&b, &x) in block.frames.iter().zip(&input.frames) {
        let sum = tape.add(b, x)?;
        frames.push(tape.layer_norm(sum, stage.norm_gain, stage.norm_bias, eps)?);
    }
    Ok(FrameSeq { frames, ..block })
}

/// Output of [`temporal_attention_pool`].
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// `B × N·H` attention-weighted sum of flattened frames.
    pub features: Var,
    /// `B × T` attention weights; exactly zero at masked frames.
    pub weights: Var,
}

/// Scores each flattened frame with `e_t = wᵀ h_t + b`, masks padded frames
/// with `-inf`, normalizes over time with a softmax and returns `Σ α_t h_t`.
pub fn temporal_attention_pool(
    tape: &mut Tape,
    attn_w: Var,
    attn_b: Var,
    seq: &FrameSeq,
    mask: &[bool],
) -> Result<Pooled> {
    let (b, t) = (seq.batch, seq.len());
    if mask.len() != b * t {
        return Err(Error::Shape {
            op: "temporal_attention_pool",
            lhs: vec![b, t],
            rhs: vec![mask.len()],
        });
    }
    let width = seq.n_nodes * tape.shape(seq.frames[0])[1];
    let mut flat = Vec::with_capacity(t);
    let mut scores = Vec::with_capacity(t);
    for &f in &seq.frames {
        let h = tape.reshape(f, &[b, width])?;
        let e = tape.matmul(h, attn_w)?;
        scores.push(tape.add_bias(e, attn_b)?);
        flat.push(h);
    }
    let scores = tape.concat_cols(&scores)?;
    let scores = tape.mask_fill(scores, mask)?;
    let weights = tape.softmax_rows(scores)?;
    let mut pooled: Option<Var> = None;
    for (ti, &h) in flat.iter().enumerate() {
        let a = tape.select_col(weights, ti)?;
        let term = tape.scale_rows(h, a)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(Pooled {
        features: pooled.expect("at least one frame"),
        weights,
    })
}

/// Two hidden dense layers with dropout, then the output projection.
/// Returns raw logits; the softmax lives in the loss and in [`predict`].
pub fn classify<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    pooled: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = tape.matmul(pooled, params.fc1_w)?;
    let h = tape.add_bias(h, params.fc1_b)?;
    let h = tape.activate(h, CLASSIFIER_ACTIVATION)?;
    let h = tape.dropout(h, dropout, training, rng)?;
    let h = tape.matmul(h, params.fc2_w)?;
    let h = tape.add_bias(h, params.fc2_b)?;
    let h = tape.activate(h, CLASSIFIER_ACTIVATION)?;
    let h = tape.dropout(h, dropout, training, rng)?;
    let logits = tape.matmul(h, params.out_w)?;
    tape.add_bias(logits, params.out_b)
}

/// Result of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `B × C`.
    pub logits: Var,
    /// `B × T` temporal attention weights.
    pub attention: Var,
}

/// Embedding, `K` residual stages, temporal attention pooling and the
/// classifier, all recorded on `tape`.
pub fn model_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    batch: &SequenceBatch,
    graph: &GraphContext,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    check_batch(config, batch, graph)?;
    if params.stages.len() != config.stages {
        return Err(Error::invalid(format!(
            "{} stage parameter sets for a {}-stage config",
            params.stages.len(),
            config.stages
        )));
    }
    let mut h = embed_input(tape, params, batch)?;
    for stage in &params.stages {
        h = residual_norm_stage(tape, stage, &h, graph, &batch.mask, config.norm_epsilon)?;
    }
    let pooled = temporal_attention_pool(tape, params.attn_w, params.attn_b, &h, &batch.mask)?;
    let logits = classify(tape, params, pooled.features, config.dropout, training, rng)?;
    debug_assert_eq!(tape.shape(logits), &[batch.batch_size(), config.classes]);
    Ok(ForwardOutput {
        logits,
        attention: pooled.weights,
    })
}

fn check_batch(config: &ModelConfig, batch: &SequenceBatch, graph: &GraphContext) -> Result<()> {
    let expected = [config.seq_len, config.n_nodes, config.input_dim];
    let actual = [batch.seq_len(), batch.n_nodes(), batch.input_dim()];
    if expected != actual || graph.n_nodes() != config.n_nodes {
        return Err(Error::Shape {
            op: "model_forward",
            lhs: expected.to_vec(),
            rhs: actual.to_vec(),
        });
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= config.classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            config.classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the batch, one term per sequence.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probability: f64,
}

/// Argmax class (lowest index on ties) and its softmax probability, per row.
pub fn predict(logits: &Tensor) -> Result<Vec<Prediction>> {
    let (_, c) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut class = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[class] {
                    class = j;
                }
            }
            let mut probs = row.to_vec();
            softmax_in_place(&mut probs).expect("finite logits");
            Prediction {
                class,
                probability: probs[class],
            }
        })
        .collect())
}
