use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::EvalReport;
use super::optim::{adamw_step_model, AdamWConfig, AdamWState};
use crate::dataio::{collate, PreparedSample};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::graphnet::GraphContext;
use crate::model::{
    cross_entropy_loss, model_forward, predict, save_checkpoint, ModelConfig, ModelParams, Prediction, SequenceBatch,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
}

impl LrSchedule {
    pub fn lr(self, base: f64, _epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Stop after this many epochs without a new best validation accuracy.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 100,
            batch_size: 64,
            seed: 0,
            schedule: LrSchedule::Constant,
            patience: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    /// Equal in every field except wall time, comparing floats bitwise.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.val_acc.to_bits() == other.val_acc.to_bits()
    }
}

/// Where [`train`] writes its artifacts. Unset paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best: ModelParams,
    pub last: ModelParams,
    pub steps: u64,
}

/// Forward, backward and one optimizer update on `batch`. Returns the loss.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    optim: &mut AdamWState,
    config: &ModelConfig,
    graph: &GraphContext,
    batch: &SequenceBatch,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = model_forward(&mut tape, &vars, config, batch, graph, true, rng)?;
    let loss = cross_entropy_loss(&mut tape, out.logits, &batch.labels)?;
    let value = tape.value(loss).data()[0];
    let grads = vars.gradients(&tape.backward(loss)?)?;
    adamw_step_model(optim, params, &grads)?;
    Ok(value)
}

/// Predictions and mean cross-entropy over `samples`, dropout off.
pub fn predict_samples(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &GraphContext,
    samples: &[PreparedSample],
    batch_size: usize,
) -> Result<(Vec<Prediction>, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut total_loss = 0.0;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = collate(&refs)?;
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = model_forward(&mut tape, &vars, config, &batch, graph, false, &mut unused)?;
        let loss = cross_entropy_loss(&mut tape, out.logits, &batch.labels)?;
        total_loss += tape.value(loss).data()[0] * chunk.len() as f64;
        preds.extend(predict(tape.value(out.logits))?);
    }
    Ok((preds, total_loss / samples.len() as f64))
}

pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &GraphContext,
    samples: &[PreparedSample],
    batch_size: usize,
) -> Result<EvalReport> {
    let (preds, loss) = predict_samples(params, config, graph, samples, batch_size)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.class).collect();
    EvalReport::from_predictions(config.classes, &truth, &predicted, loss)
}

/// Seeded-shuffle minibatch training with AdamW, validating after every
/// epoch and keeping the parameters with the best validation accuracy
/// (earliest epoch on ties).
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut params: ModelParams,
    config: &ModelConfig,
    graph: &GraphContext,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    plan: &TrainPlan,
    optim: &AdamWConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    plan.validate()?;
    optim.validate()?;
    params.check_shapes(config)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut log_file = match &outputs.log {
        Some(path) => Some(BufWriter::new(fs::File::create(path)?)),
        None => None,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(0x5EED));
    let mut state = AdamWState::new(optim.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(plan.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let start = Instant::now();

    for epoch in 1..=plan.epochs {
        state.config.lr = plan.schedule.lr(optim.lr, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(plan.batch_size) {
            let refs: Vec<&PreparedSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = collate(&refs)?;
            let loss = train_step(&mut params, &mut state, config, graph, &batch, &mut dropout_rng)
                .map_err(|e| annotate(e, epoch))?;
            loss_sum += loss * idx.len() as f64;
        }
        let report = evaluate(&params, config, graph, val_set, plan.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: report.mean_loss,
            val_acc: report.accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_loss {:.6} val_acc {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_acc
        );
        if let Some(w) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        let improved = best.as_ref().is_none_or(|(_, acc, _)| record.val_acc > *acc);
        if improved {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(path, &params, config, &graph.topology)?;
            }
            best = Some((epoch, record.val_acc, params.clone()));
        }
        log.push(record);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if plan.patience.is_some_and(|p| epoch - best_epoch >= p) {
            log::info!("no improvement for {} epochs; stopping", epoch - best_epoch);
            break;
        }
    }
    let (best_epoch, best_val_acc, best) = best.expect("at least one epoch");
    Ok(TrainResult {
        log,
        best_epoch,
        best_val_acc,
        best,
        last: params,
        steps: state.t,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::NonFinite {
            op: format!("{op} (epoch {epoch})"),
            node,
        },
        other => other,
    }
}
