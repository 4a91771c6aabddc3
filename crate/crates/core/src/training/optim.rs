use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

/// One update of every parameter:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// m̂ = m / (1−β₁ᵗ)          v̂ = v / (1−β₂ᵗ)
/// p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)
/// ```
///
/// Moments are created on the first call; later calls must pass the same
/// parameter shapes in the same order.
pub fn adamw_step(state: &mut AdamWState, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of parameter {i}"),
                node: i,
            });
        }
    }
    if state.t == 0 {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(Error::invalid("parameter layout changed between optimizer steps"));
    }

    state.t += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = p.data_mut();
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
    }
    Ok(())
}

/// [`adamw_step`] over every tensor of the model, in canonical order.
pub fn adamw_step_model(state: &mut AdamWState, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
    let mut names = Vec::new();
    let mut owned = Vec::new();
    params.visit_mut(&mut |n, t| {
        names.push(n.to_string());
        owned.push(std::mem::replace(t, Tensor::scalar(0.0)));
    });
    let mut gs = Vec::with_capacity(names.len());
    grads.visit(&mut |_, g| gs.push(g.clone()));
    let result = if grads.names() != names {
        Err(Error::invalid("gradient tree does not match the parameter tree"))
    } else {
        let mut ps: Vec<&mut Tensor> = owned.iter_mut().collect();
        let refs: Vec<&Tensor> = gs.iter().collect();
        adamw_step(state, &mut ps, &refs).map_err(|e| match e {
            Error::NonFinite { node, .. } => Error::NonFinite {
                op: format!("gradient of `{}`", names[node]),
                node,
            },
            other => other,
        })
    };
    let mut it = owned.into_iter();
    params.visit_mut(&mut |_, t| *t = it.next().expect("same tree"));
    result
}
