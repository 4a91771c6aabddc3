//! Spatial layers over the per-frame skeleton graph.
//!
//! Both layers are neighbor aggregations `h_v' = σ(W · AGG{h_u : u ∈ N(v)})`:
//! the GCN aggregates through the fixed symmetric-normalized adjacency with
//! self-loops, the GAT through learned softmax attention over each node's
//! closed neighborhood. Inputs may stack several graphs row-wise
//! (`(G·N)×d`), which is how the model evaluates every frame of a batch at once.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Activation, Neighborhoods, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;

/// Fixed joint graph shared by every frame of a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

const POSENET_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const POSENET_EDGES: [(usize, usize); 18] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

impl SkeletonTopology {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let topo = SkeletonTopology {
            n_nodes,
            edges,
            names: None,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn chain(n_nodes: usize) -> Result<Self> {
        SkeletonTopology::new(n_nodes, (1..n_nodes).map(|i| (i - 1, i)).collect())
    }

    /// The 17-keypoint PoseNet joint set with its limb connections.
    pub fn posenet17() -> Self {
        SkeletonTopology {
            n_nodes: POSENET_JOINTS.len(),
            edges: POSENET_EDGES.to_vec(),
            names: Some(POSENET_JOINTS.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("topology needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= self.n_nodes || b >= self.n_nodes {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) out of range for {} nodes",
                    self.n_nodes
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop on node {a} in edge list")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
        }
        if let Some(names) = &self.names {
            if names.len() != self.n_nodes {
                return Err(Error::Config(format!(
                    "{} names for {} nodes",
                    names.len(),
                    self.n_nodes
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let topo: SkeletonTopology = serde_json::from_str(&fs::read_to_string(path)?)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Symmetric binary adjacency without self-loops.
    pub fn adjacency(&self) -> Tensor {
        let n = self.n_nodes;
        let mut a = Tensor::zeros(vec![n, n]);
        for &(i, j) in &self.edges {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
        }
        a
    }

    /// Sorted neighbor lists including the node itself.
    pub fn closed_neighborhoods(&self) -> Vec<Vec<usize>> {
        let mut lists: Vec<BTreeSet<usize>> = (0..self.n_nodes).map(|v| BTreeSet::from([v])).collect();
        for &(a, b) in &self.edges {
            lists[a].insert(b);
            lists[b].insert(a);
        }
        lists.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_nodes {
            return Err(Error::invalid("permutation length differs from node count"));
        }
        let mut names = self.names.clone();
        if let Some(old) = &self.names {
            let mut new = old.clone();
            for (i, &p) in perm.iter().enumerate() {
                new[p] = old[i].clone();
            }
            names = Some(new);
        }
        let topo = SkeletonTopology {
            n_nodes: self.n_nodes,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            names,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Stable 64-bit fingerprint of the node count and undirected edge set.
    /// Node names do not contribute.
    pub fn fingerprint(&self) -> u64 {
        let edges: BTreeSet<(usize, usize)> =
            self.edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let mut hasher = Sha256::new();
        hasher.update((self.n_nodes as u64).to_le_bytes());
        for (a, b) in edges {
            hasher.update((a as u64).to_le_bytes());
            hasher.update((b as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}`, computed once per topology.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: Arc<Tensor>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

pub fn build_normalized_adjacency(topo: &SkeletonTopology) -> Result<NormalizedAdjacency> {
    topo.validate()?;
    let n = topo.n_nodes;
    let a = topo.adjacency();
    let degree: Vec<f64> = (0..n)
        .map(|i| 1.0 + (0..n).map(|j| a.at(&[i, j])).sum::<f64>())
        .collect();
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let aij = a.at(&[i, j]) + if i == j { 1.0 } else { 0.0 };
            if aij != 0.0 {
                m.set(&[i, j], aij / (degree[i] * degree[j]).sqrt());
            }
        }
    }
    Ok(NormalizedAdjacency {
        matrix: Arc::new(m),
    })
}

/// Per-topology data precomputed for the spatial layers.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub topology: SkeletonTopology,
    pub adjacency: NormalizedAdjacency,
    pub(crate) neighborhoods: Arc<Neighborhoods>,
}

impl GraphContext {
    pub fn new(topology: SkeletonTopology) -> Result<Self> {
        let adjacency = build_normalized_adjacency(&topology)?;
        let neighborhoods = Arc::new(Neighborhoods::new(topology.closed_neighborhoods()));
        Ok(GraphContext {
            topology,
            adjacency,
            neighborhoods,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes
    }
}

/// `σ(Â_norm · H · W)` for every graph stacked in `h[(G·N)×d_in]`.
pub fn gcn_forward(
    tape: &mut Tape,
    adj: &NormalizedAdjacency,
    h: Var,
    w: Var,
    act: Activation,
) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let agg = tape.graph_propagate(hw, adj.matrix.clone())?;
    tape.activate(agg, act)
}

/// Multi-head attention layer weights.
///
/// `weight` is `d_in × (heads·d_head)`: column block `k` is head `k`'s
/// projection. Row `k` of `attn` (`heads × 2·d_head`) is head `k`'s attention
/// vector, source half first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams<T = Tensor> {
    pub weight: T,
    pub attn: T,
    pub heads: usize,
    pub leaky_slope: f64,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl GatLayerParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_out.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "output width {d_out} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_out / heads;
        Ok(GatLayerParams {
            weight: glorot_uniform(&[d_in, d_out], d_in, d_head, rng),
            attn: glorot_uniform(&[heads, 2 * d_head], 2 * d_head, 1, rng),
            heads,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn d_head(&self) -> usize {
        self.weight.shape()[1] / self.heads
    }

    fn head_projection(&self, head: usize) -> Result<Tensor> {
        let (d_in, width) = self.weight.dims2()?;
        let dh = width / self.heads;
        let mut data = Vec::with_capacity(d_in * dh);
        for r in 0..d_in {
            data.extend_from_slice(&self.weight.data()[r * width + head * dh..r * width + (head + 1) * dh]);
        }
        Tensor::new(vec![d_in, dh], data)
    }
}

impl<T> GatLayerParams<T> {
    pub fn map<U, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U, E>) -> Result<GatLayerParams<U>, E> {
        Ok(GatLayerParams {
            weight: f(&format!("{prefix}.weight"), &self.weight)?,
            attn: f(&format!("{prefix}.attn"), &self.attn)?,
            heads: self.heads,
            leaky_slope: self.leaky_slope,
        })
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.attn"), &mut self.attn);
    }
}

/// Attention coefficients `α_vu` of one head for a single graph `h[N×d_in]`.
///
/// Built from generic tape primitives (projection, outer sum of the two
/// score halves, LeakyReLU, `-inf` masking outside the closed neighborhood,
/// row softmax), independent of the fused kernel used by [`gat_forward`].
pub fn gat_coefficients(
    params: &GatLayerParams,
    head: usize,
    h: &Tensor,
    topo: &SkeletonTopology,
) -> Result<Tensor> {
    if head >= params.heads {
        return Err(Error::invalid(format!(
            "head {head} out of range for {} heads",
            params.heads
        )));
    }
    let n = topo.n_nodes;
    if h.dims2()?.0 != n {
        return Err(Error::Shape {
            op: "gat_coefficients",
            lhs: h.shape().to_vec(),
            rhs: vec![n],
        });
    }
    let dh = params.d_head();
    let a_row = &params.attn.data()[head * 2 * dh..(head + 1) * 2 * dh];

    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let w = tape.constant(params.head_projection(head)?);
    let a_src = tape.constant(Tensor::new(vec![dh, 1], a_row[..dh].to_vec())?);
    let a_dst = tape.constant(Tensor::new(vec![dh, 1], a_row[dh..].to_vec())?);

    let wh = tape.matmul(hv, w)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let logits = tape.outer_sum(s_src, s_dst)?;
    let logits = tape.activate(logits, Activation::LeakyRelu(params.leaky_slope))?;
    let mut keep = vec![false; n * n];
    for (v, list) in topo.closed_neighborhoods().iter().enumerate() {
        for &u in list {
            keep[v * n + u] = true;
        }
    }
    let masked = tape.mask_fill(logits, &keep)?;
    let alpha = tape.softmax_rows(masked)?;
    Ok(tape.value(alpha).clone())
}

/// `σ(Σ_u α_vu W h_u)` per head, heads concatenated along the feature axis.
pub fn gat_forward(
    tape: &mut Tape,
    params: &GatLayerParams<Var>,
    h: Var,
    graph: &GraphContext,
    act: Activation,
) -> Result<Var> {
    let wh = tape.matmul(h, params.weight)?;
    let agg = tape.gat_aggregate(
        wh,
        params.attn,
        params.heads,
        graph.neighborhoods.clone(),
        params.leaky_slope,
    )?;
    tape.activate(agg, act)
}
