use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{GnnKind, ModelConfig};
use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphnet::GatLayerParams;
use crate::init::glorot_uniform;
use crate::recurrent::GruCellParams;

#[derive(Clone, Debug, PartialEq)]
pub enum GnnParams<T = Tensor> {
    Gcn { weight: T },
    Gat(GatLayerParams<T>),
}

/// One residual stage: spatial layer, per-node GRU, and the normalization
/// applied after the residual sum.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T = Tensor> {
    pub gnn: GnnParams<T>,
    pub gru: GruCellParams<T>,
    pub norm_gain: T,
    pub norm_bias: T,
}

/// Every learnable tensor of the classifier.
///
/// The same structure holds values (`T = Tensor`), tape handles
/// (`T = Var`), gradients, and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `d × H` per-joint input embedding.
    pub embed_w: T,
    pub embed_b: T,
    pub stages: Vec<StageParams<T>>,
    /// `N·H × 1` frame scorer, shared across time steps.
    pub attn_w: T,
    pub attn_b: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
    pub out_w: T,
    pub out_b: T,
}

impl<T> GnnParams<T> {
    fn map<U, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<GnnParams<U>, E> {
        Ok(match self {
            GnnParams::Gcn { weight } => GnnParams::Gcn {
                weight: f(&format!("{prefix}.gcn.weight"), weight)?,
            },
            GnnParams::Gat(p) => GnnParams::Gat(p.map(&format!("{prefix}.gat"), f)?),
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        match self {
            GnnParams::Gcn { weight } => f(&format!("{prefix}.gcn.weight"), weight),
            GnnParams::Gat(p) => p.visit_mut(&format!("{prefix}.gat"), f),
        }
    }
}

impl<T> StageParams<T> {
    fn map<U, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<StageParams<U>, E> {
        Ok(StageParams {
            gnn: self.gnn.map(prefix, f)?,
            gru: self.gru.map(&format!("{prefix}.gru"), f)?,
            norm_gain: f(&format!("{prefix}.norm.gain"), &self.norm_gain)?,
            norm_bias: f(&format!("{prefix}.norm.bias"), &self.norm_bias)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.gnn.visit_mut(prefix, f);
        self.gru.visit_mut(&format!("{prefix}.gru"), f);
        f(&format!("{prefix}.norm.gain"), &mut self.norm_gain);
        f(&format!("{prefix}.norm.bias"), &mut self.norm_bias);
    }
}

impl<T> ModelParams<T> {
    /// Maps every tensor, visiting them in the canonical order used by
    /// checkpoints and the optimizer.
    pub fn map<U, E>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let embed_w = f("embed.weight", &self.embed_w)?;
        let embed_b = f("embed.bias", &self.embed_b)?;
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.map(&format!("stage{i}"), f))
            .collect::<Result<_, E>>()?;
        Ok(ModelParams {
            embed_w,
            embed_b,
            stages,
            attn_w: f("attn.weight", &self.attn_w)?,
            attn_b: f("attn.bias", &self.attn_b)?,
            fc1_w: f("fc1.weight", &self.fc1_w)?,
            fc1_b: f("fc1.bias", &self.fc1_b)?,
            fc2_w: f("fc2.weight", &self.fc2_w)?,
            fc2_b: f("fc2.bias", &self.fc2_b)?,
            out_w: f("out.weight", &self.out_w)?,
            out_b: f("out.bias", &self.out_b)?,
        })
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("embed.weight", &mut self.embed_w);
        f("embed.bias", &mut self.embed_b);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stage{i}"), f);
        }
        f("attn.weight", &mut self.attn_w);
        f("attn.bias", &mut self.attn_b);
        f("fc1.weight", &mut self.fc1_w);
        f("fc1.bias", &mut self.fc1_b);
        f("fc2.weight", &mut self.fc2_w);
        f("fc2.bias", &mut self.fc2_b);
        f("out.weight", &mut self.out_w);
        f("out.bias", &mut self.out_b);
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        let _ = self.map(&mut |name, t| {
            f(name, t);
            Ok::<(), std::convert::Infallible>(())
        });
    }

    /// Copy of the tensor registered under `name`.
    pub fn get(&self, name: &str) -> Option<T>
    where
        T: Clone,
    {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }
}

impl ModelParams<Tensor> {
    /// Glorot-uniform matrices, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, n) = (config.input_dim, config.hidden, config.n_nodes);
        let frame = config.frame_width();
        let ffn = config.classifier_width();
        let c = config.classes;
        let mut stages = Vec::with_capacity(config.stages);
        for _ in 0..config.stages {
            let gnn = match config.gnn {
                GnnKind::Gcn => GnnParams::Gcn {
                    weight: glorot_uniform(&[h, h], h, h, rng),
                },
                GnnKind::Gat => {
                    let mut p = GatLayerParams::init(h, h, config.heads, rng)?;
                    p.leaky_slope = config.leaky_slope;
                    GnnParams::Gat(p)
                }
            };
            stages.push(StageParams {
                gnn,
                gru: GruCellParams::init(h, h, rng),
                norm_gain: Tensor::full(vec![h], 1.0),
                norm_bias: Tensor::zeros(vec![h]),
            });
        }
        debug_assert_eq!(frame, n * h);
        Ok(ModelParams {
            embed_w: glorot_uniform(&[d, h], d, h, rng),
            embed_b: Tensor::zeros(vec![h]),
            stages,
            attn_w: glorot_uniform(&[frame, 1], frame, 1, rng),
            attn_b: Tensor::zeros(vec![1]),
            fc1_w: glorot_uniform(&[frame, ffn], frame, ffn, rng),
            fc1_b: Tensor::zeros(vec![ffn]),
            fc2_w: glorot_uniform(&[ffn, ffn], ffn, ffn, rng),
            fc2_b: Tensor::zeros(vec![ffn]),
            out_w: glorot_uniform(&[ffn, c], ffn, c, rng),
            out_b: Tensor::zeros(vec![c]),
        })
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, t| Ok::<_, Error>(Tensor::zeros(t.shape().to_vec())))
            .expect("infallible")
    }

    /// Registers every tensor as a named differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |name, t| Ok::<_, Error>(tape.leaf_named(name, t.clone())))
            .expect("infallible")
    }

    /// Registers every tensor as a constant (no gradients), for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |_, t| Ok::<_, Error>(tape.constant(t.clone())))
            .expect("infallible")
    }

    pub fn count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let template = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut expected = Vec::new();
        template.visit(&mut |n, t| expected.push((n.to_string(), t.shape().to_vec())));
        let mut actual = Vec::new();
        self.visit(&mut |n, t| actual.push((n.to_string(), t.shape().to_vec())));
        if expected != actual {
            let diff = expected
                .iter()
                .zip(&actual)
                .find(|(e, a)| e != a)
                .map(|(e, a)| format!("{} {:?} vs {} {:?}", e.0, e.1, a.0, a.1))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), actual.len()));
            return Err(Error::Incompatible(format!("parameter layout differs from config: {diff}")));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.visit(&mut |_, t| a.push(t.clone()));
        other.visit(&mut |_, t| b.push(t.clone()));
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }
}

impl ModelParams<Var> {
    /// Collects the gradient of every bound leaf.
    pub fn gradients(&self, grads: &Gradients) -> Result<ModelParams<Tensor>> {
        self.map(&mut |name, v| {
            grads
                .get(*v)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no gradient recorded for `{name}`")))
        })
    }
}
