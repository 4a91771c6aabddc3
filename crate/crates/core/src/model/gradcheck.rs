use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{GnnKind, ModelConfig};
use super::forward::{cross_entropy_loss, model_forward, SequenceBatch};
use super::params::ModelParams;
use crate::diffcore::{finite_diff_report, FiniteDiffReport, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graphnet::{GraphContext, SkeletonTopology};

/// Tolerance on the maximum relative error for the whole model.
pub const MODEL_GRADCHECK_TOL: f64 = 1e-4;
pub const MODEL_GRADCHECK_EPS: f64 = 1e-5;

/// Small GAT model on a 3-joint chain with dropout off.
pub fn reference_config() -> ModelConfig {
    ModelConfig {
        stages: 2,
        gnn: GnnKind::Gat,
        heads: 2,
        hidden: 4,
        seq_len: 3,
        n_nodes: 3,
        input_dim: 2,
        classes: 3,
        dropout: 0.0,
        norm_epsilon: 1e-5,
        classifier_width: None,
        leaky_slope: 0.2,
    }
}

/// Deliberate error added to one parameter's analytic gradient, used to
/// confirm that the check catches a wrong backward rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientFault {
    pub param: String,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub report: FiniteDiffReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradcheck {
    pub checks: Vec<ParamCheck>,
}

impl ModelGradcheck {
    pub fn worst(&self) -> &ParamCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            .expect("at least one parameter")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().report.max_rel_error
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// Compares backpropagated gradients of the mean cross-entropy against
/// central differences for every coordinate of every parameter.
///
/// The batch holds two random sequences; the last frame of the second one is
/// padding, so the masked attention path is covered too.
pub fn model_gradcheck(
    config: &ModelConfig,
    topology: &SkeletonTopology,
    seed: u64,
    eps: f64,
    fault: Option<&GradientFault>,
) -> Result<ModelGradcheck> {
    if config.dropout != 0.0 {
        return Err(Error::Config("gradient check requires model.dropout = 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(config, &mut rng)?;
    if let Some(f) = fault {
        if !params.names().contains(&f.param) {
            return Err(Error::invalid(format!("no parameter named `{}`", f.param)));
        }
    }
    let graph = GraphContext::new(topology.clone())?;
    let batch = check_batch(config, &mut rng)?;

    let mut checks = Vec::new();
    for name in params.names() {
        let initial = params.get(&name).expect("listed name");
        let objective = |p: &Tensor| -> Result<(f64, Tensor)> {
            let trial = params.map(&mut |n, t| Ok::<_, Error>(if n == name { p.clone() } else { t.clone() }))?;
            let mut tape = Tape::new();
            let vars = trial.bind(&mut tape);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let out = model_forward(&mut tape, &vars, config, &batch, &graph, false, &mut unused)?;
            let loss = cross_entropy_loss(&mut tape, out.logits, &batch.labels)?;
            let grads = vars.gradients(&tape.backward(loss)?)?;
            let mut g = grads.get(&name).expect("listed name");
            if let Some(f) = fault.filter(|f| f.param == name) {
                g = g.map(|v| v + f.offset);
            }
            Ok((tape.value(loss).data()[0], g))
        };
        let report = finite_diff_report(objective, &initial, eps)?;
        checks.push(ParamCheck { name, report });
    }
    Ok(ModelGradcheck { checks })
}

fn check_batch(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<SequenceBatch> {
    let b = 2;
    let (t, n, d) = (config.seq_len, config.n_nodes, config.input_dim);
    let mut data: Vec<f64> = (0..b * t * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut mask = vec![true; b * t];
    if t > 1 {
        mask[b * t - 1] = false;
        let pad = ((b - 1) * t + t - 1) * n * d;
        data[pad..pad + n * d].iter_mut().for_each(|v| *v = 0.0);
    }
    let labels = (0..b).map(|_| rng.gen_range(0..config.classes)).collect();
    SequenceBatch::new(Tensor::new(vec![b, t, n, d], data)?, mask, labels)
}
