use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::DEFAULT_LEAKY_SLOPE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gcn,
    Gat,
}

impl std::str::FromStr for GnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(GnnKind::Gcn),
            "gat" => Ok(GnnKind::Gat),
            other => Err(Error::Config(format!("unknown gnn kind `{other}` (expected gcn or gat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked residual stages `K`.
    pub stages: usize,
    pub gnn: GnnKind,
    pub heads: usize,
    /// Feature width `H` carried through every stage.
    pub hidden: usize,
    /// Frames per sequence `T`.
    pub seq_len: usize,
    pub n_nodes: usize,
    /// Coordinates per joint `d`.
    pub input_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub norm_epsilon: f64,
    /// Hidden width of the two classifier layers; `N·H/2` when unset.
    #[serde(default)]
    pub classifier_width: Option<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl Default for ModelConfig {
    /// Desk-scale defaults: GAT stages of width 64 over the 17-joint skeleton.
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            gnn: GnnKind::Gat,
            heads: 8,
            hidden: 64,
            seq_len: 32,
            n_nodes: 17,
            input_dim: 2,
            classes: 226,
            dropout: 0.3,
            norm_epsilon: 1e-5,
            classifier_width: None,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return fail("model.stages must be at least 1".into());
        }
        if self.hidden == 0 || self.n_nodes == 0 {
            return fail("model.hidden and model.n_nodes must be positive".into());
        }
        if self.gnn == GnnKind::Gat && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
            return fail(format!(
                "model.hidden = {} is not divisible by model.heads = {}",
                self.hidden, self.heads
            ));
        }
        if self.classes < 2 {
            return fail(format!("model.classes = {} (need at least 2)", self.classes));
        }
        if self.seq_len == 0 {
            return fail("model.seq_len must be at least 1".into());
        }
        if !(2..=3).contains(&self.input_dim) {
            return fail(format!("model.input_dim = {} (must be 2 or 3)", self.input_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout = {} outside [0, 1)", self.dropout));
        }
        if !(self.norm_epsilon > 0.0) {
            return fail("model.norm_epsilon must be positive".into());
        }
        if self.classifier_width == Some(0) {
            return fail("model.classifier_width must be positive".into());
        }
        Ok(())
    }

    /// Flattened per-frame width `N·H`.
    pub fn frame_width(&self) -> usize {
        self.n_nodes * self.hidden
    }

    pub fn classifier_width(&self) -> usize {
        self.classifier_width
            .unwrap_or_else(|| (self.frame_width() / 2).max(1))
    }
}
