use std::sync::Arc;

use rand::Rng;

use super::activation::{Activation, Elementwise};
use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Closed neighborhoods of a fixed graph, used by the fused attention op.
#[derive(Clone, Debug)]
pub(crate) struct Neighborhoods {
    pub lists: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl Neighborhoods {
    pub fn new(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len());
        let mut total = 0;
        for l in &lists {
            offsets.push(total);
            total += l.len();
        }
        Neighborhoods {
            lists,
            offsets,
            total,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Activate(Var, Activation),
    Affine(Var, f64),
    SoftmaxRows(Var),
    MaskFill(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SelectCol(Var, usize),
    ScaleRows(Var, Var),
    Reshape(Var),
    OuterSum(Var, Var),
    GraphPropagate {
        x: Var,
        adj: Arc<Tensor>,
    },
    GatAggregate {
        wh: Var,
        attn: Var,
        heads: usize,
        nbrs: Arc<Neighborhoods>,
        slope: f64,
        alpha: Vec<f64>,
        pre: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Activate(..) => "activate",
            Op::Affine(..) => "affine",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MaskFill(..) => "mask_fill",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::SelectCol(..) => "select_col",
            Op::ScaleRows(..) => "scale_rows",
            Op::Reshape(..) => "reshape",
            Op::OuterSum(..) => "outer_sum",
            Op::GraphPropagate { .. } => "graph_propagate",
            Op::GatAggregate { .. } => "gat_aggregate",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout(..) => "dropout",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::OuterSum(a, b) => vec![*a, *b],
            Op::Activate(x, _)
            | Op::Affine(x, _)
            | Op::SoftmaxRows(x)
            | Op::MaskFill(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SelectCol(x, _)
            | Op::Reshape(x)
            | Op::Dropout(x, _) => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::GraphPropagate { x, .. } => vec![*x],
            Op::GatAggregate { wh, attn, .. } => vec![*wh, *attn],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only record of a forward computation.
///
/// Every op appends one node whose inputs are earlier nodes, so the node order
/// is already a topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the tape's differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros for leaves not on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    pub fn leaf_named(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let node = self.nodes.len();
        let masked = matches!(op, Op::MaskFill(..));
        let finite = if masked {
            value.data().iter().all(|v| !v.is_nan() && *v != f64::INFINITY)
        } else {
            value.is_finite()
        };
        if !finite {
            let inputs = op
                .inputs()
                .iter()
                .filter_map(|v| self.nodes[v.0].name.clone())
                .collect::<Vec<_>>();
            let mut label = op.name().to_string();
            if !inputs.is_empty() {
                label = format!("{label}({})", inputs.join(", "));
            }
            return Err(Error::NonFinite { op: label, node });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Ok(Var(node))
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    /// `a[m×k] · b[n×k]ᵀ`, used for weights stored as `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMulNt(a, b), Tensor::from_parts(vec![m, n], out))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    /// Adds `bias[n]` to every row of `x[m×n]`. The only broadcasting op.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let tb = self.value(bias);
        if tb.len() != n {
            return Err(shape_err("add_bias", self.value(x), tb));
        }
        let b = tb.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Op::AddBias(x, bias), Tensor::from_parts(vec![m, n], out))
    }

    pub fn activate(&mut self, x: Var, f: Activation) -> Result<Var> {
        if f == Activation::Identity {
            return Ok(x);
        }
        let v = self.value(x).map(|t| f.apply(t));
        self.push(Op::Activate(x, f), v)
    }

    /// Dispatches on a function tag: an activation name, `add`, `mul` or `sub`.
    pub fn elementwise(&mut self, tag: &str, args: &[Var]) -> Result<Var> {
        let f: Elementwise = tag.parse()?;
        match (f, args) {
            (Elementwise::Unary(act), [x]) => self.activate(*x, act),
            (Elementwise::Add, [a, b]) => self.add(*a, *b),
            (Elementwise::Mul, [a, b]) => self.mul(*a, *b),
            (Elementwise::Sub, [a, b]) => self.sub(*a, *b),
            _ => Err(Error::invalid(format!(
                "`{tag}` called with {} arguments",
                args.len()
            ))),
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    /// `factor · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, factor: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|t| factor * t + shift);
        self.push(Op::Affine(x, factor), v)
    }

    /// Row-wise softmax over a matrix. `-inf` entries are masked and receive
    /// exactly zero probability; a row with no finite entry is an error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            softmax_in_place(row).ok_or_else(|| {
                Error::invalid(format!("softmax row {i} is fully masked"))
            })?;
        }
        self.push(Op::SoftmaxRows(x), Tensor::from_parts(vec![m, n], out))
    }

    /// Replaces entries where `keep` is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(Op::MaskFill(x), v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (m, _) = self.mat(first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, nx) = self.mat(x)?;
            if mx != m {
                return Err(shape_err("concat_cols", self.value(first), self.value(x)));
            }
            widths.push(nx);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for i in 0..m {
                out[i * total + col..i * total + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        self.push(Op::ConcatCols(xs.to_vec()), Tensor::from_parts(vec![m, total], out))
    }

    /// Column `col` of `x[m×n]` as an `m×1` matrix.
    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if col >= n {
            return Err(Error::invalid(format!("column {col} out of range for width {n}")));
        }
        let src = self.value(x).data();
        let out = (0..m).map(|i| src[i * n + col]).collect();
        self.push(Op::SelectCol(x, col), Tensor::from_parts(vec![m, 1], out))
    }

    /// Multiplies row `i` of `x[m×n]` by `s[i]`, with `s` of length `m`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if self.value(s).len() != m {
            return Err(shape_err("scale_rows", self.value(x), self.value(s)));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &f) in out.chunks_exact_mut(n).zip(sv) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(Op::ScaleRows(x, s), Tensor::from_parts(vec![m, n], out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), t)
    }

    /// `out[i][j] = col[i] + row[j]`.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let c = self.value(col).data();
        let r = self.value(row).data();
        let (m, n) = (c.len(), r.len());
        let mut out = Vec::with_capacity(m * n);
        for &ci in c {
            out.extend(r.iter().map(|&rj| ci + rj));
        }
        self.push(Op::OuterSum(col, row), Tensor::from_parts(vec![m, n], out))
    }

    /// Applies a constant `N×N` propagation matrix to each of the `G` graphs
    /// stacked in `x[(G·N)×f]`.
    pub fn graph_propagate(&mut self, x: Var, adj: Arc<Tensor>) -> Result<Var> {
        let (rows, f) = self.mat(x)?;
        let (n, n2) = adj.dims2()?;
        if n != n2 || rows % n != 0 {
            return Err(shape_err("graph_propagate", self.value(x), &adj));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * f];
        for g in 0..rows / n {
            let block = g * n * f..(g + 1) * n * f;
            gemm_nn(adj.data(), &src[block.clone()], &mut out[block], n, n, f);
        }
        self.push(Op::GraphPropagate { x, adj }, Tensor::from_parts(vec![rows, f], out))
    }

    /// Multi-head graph attention aggregation over closed neighborhoods.
    ///
    /// `wh[(G·N)×(heads·dh)]` holds the transformed node features, head `h`
    /// in columns `h·dh..(h+1)·dh`; `attn[heads×2dh]` holds the attention
    /// vectors. For every graph, head and node `v` the op computes
    /// `α_vu = softmax_u LeakyReLU(a_srcᵀ wh_v + a_dstᵀ wh_u)` over the
    /// neighborhood of `v` and returns `Σ_u α_vu wh_u`.
    pub(crate) fn gat_aggregate(
        &mut self,
        wh: Var,
        attn: Var,
        heads: usize,
        nbrs: Arc<Neighborhoods>,
        slope: f64,
    ) -> Result<Var> {
        let (rows, width) = self.mat(wh)?;
        let (ah, a2) = self.mat(attn)?;
        let n = nbrs.n_nodes();
        if heads == 0 || width % heads != 0 || ah != heads || a2 != 2 * (width / heads) {
            return Err(shape_err("gat_aggregate", self.value(wh), self.value(attn)));
        }
        if rows % n != 0 {
            return Err(Error::invalid(format!(
                "gat_aggregate: {rows} rows is not a multiple of {n} nodes"
            )));
        }
        let dh = width / heads;
        let graphs = rows / n;
        let whv = self.value(wh).data();
        let av = self.value(attn).data();
        let mut out = vec![0.0; rows * width];
        let mut alpha = vec![0.0; graphs * heads * nbrs.total];
        let mut pre = vec![0.0; graphs * heads * nbrs.total];
        let mut s_src = vec![0.0; n];
        let mut s_dst = vec![0.0; n];
        for g in 0..graphs {
            for h in 0..heads {
                let a_src = &av[h * 2 * dh..h * 2 * dh + dh];
                let a_dst = &av[h * 2 * dh + dh..(h + 1) * 2 * dh];
                let feat = |v: usize| {
                    let r = (g * n + v) * width + h * dh;
                    &whv[r..r + dh]
                };
                for v in 0..n {
                    s_src[v] = dot(a_src, feat(v));
                    s_dst[v] = dot(a_dst, feat(v));
                }
                let base = (g * heads + h) * nbrs.total;
                for v in 0..n {
                    let list = &nbrs.lists[v];
                    let off = base + nbrs.offsets[v];
                    let z = &mut pre[off..off + list.len()];
                    let al = &mut alpha[off..off + list.len()];
                    for (k, &u) in list.iter().enumerate() {
                        z[k] = s_src[v] + s_dst[u];
                        al[k] = Activation::LeakyRelu(slope).apply(z[k]);
                    }
                    softmax_in_place(al).expect("closed neighborhood is never empty");
                    let o = (g * n + v) * width + h * dh;
                    for (k, &u) in list.iter().enumerate() {
                        let fu = feat(u);
                        for c in 0..dh {
                            out[o + c] += al[k] * fu[c];
                        }
                    }
                }
            }
        }
        self.push(
            Op::GatAggregate {
                wh,
                attn,
                heads,
                nbrs,
                slope,
                alpha,
                pre,
            },
            Tensor::from_parts(vec![rows, width], out),
        )
    }

    /// Layer normalization over the last axis of `x[m×n]` with gain and bias of length `n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", self.value(x), self.value(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gv[j] + bv[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::from_parts(vec![m, n], out),
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat(logits)?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(total / b as f64),
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time,
    /// and inference is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let len = self.value(x).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(Op::Dropout(x, mask), v)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable leaf gets an entry in the result, zero-filled when
    /// the leaf does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for input in node.op.inputs() {
                assert!(input.0 < i, "tape is not topologically ordered");
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // differentiable leaves recorded after the loss cannot influence it
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                acc(*a, &mut |da| gemm_nt(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(val(*a), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[0];
                acc(*a, &mut |da| gemm_nn(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(g, val(*a), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Activate(x, f) => {
                let (xv, yv) = (val(*x), node.value.data());
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * f.derivative(xv[k], yv[k]);
                    }
                });
            }
            Op::Affine(x, factor) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s = dot(grow, yrow);
                        for k in 0..n {
                            drow[k] += yrow[k] * (grow[k] - s);
                        }
                    }
                });
            }
            Op::MaskFill(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if y[k] != f64::NEG_INFINITY {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.value(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += scale));
            }
            Op::ConcatCols(xs) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut col = 0;
                for &x in xs {
                    let w = self.value(x).shape()[1];
                    acc(x, &mut |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::SelectCol(x, col) => {
                let n = self.value(*x).shape()[1];
                acc(*x, &mut |d| {
                    for (r, gv) in g.iter().enumerate() {
                        d[r * n + col] += gv;
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let n = node.value.shape()[1];
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |d| {
                    for (r, &f) in sv.iter().enumerate() {
                        for k in r * n..(r + 1) * n {
                            d[k] += g[k] * f;
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for (r, dr) in d.iter_mut().enumerate() {
                        *dr += dot(&g[r * n..(r + 1) * n], &xv[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::OuterSum(col, row) => {
                let n = node.value.shape()[1];
                acc(*col, &mut |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
                acc(*row, &mut |d| {
                    for grow in g.chunks_exact(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::GraphPropagate { x, adj } => {
                let (rows, f) = node.value.dims2().unwrap();
                let n = adj.shape()[0];
                acc(*x, &mut |d| {
                    for gi in 0..rows / n {
                        let block = gi * n * f..(gi + 1) * n * f;
                        gemm_tn(adj.data(), &g[block.clone()], &mut d[block], n, n, f);
                    }
                });
            }
            Op::GatAggregate {
                wh,
                attn,
                heads,
                nbrs,
                slope,
                alpha,
                pre,
            } => {
                let (d_wh, d_attn) = gat_backward(
                    g,
                    val(*wh),
                    val(*attn),
                    node.value.dims2().unwrap(),
                    *heads,
                    nbrs,
                    *slope,
                    alpha,
                    pre,
                );
                acc(*wh, &mut |d| add_into(d, &d_wh));
                acc(*attn, &mut |d| add_into(d, &d_attn));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                let gv = val(*gain);
                acc(*gain, &mut |d| {
                    for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks_exact(n) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        let xrow = &xhat[r * n..(r + 1) * n];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = grow[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[j];
                        }
                        for j in 0..n {
                            let dxh = grow[j] * gv[j];
                            d[r * n + j] += inv / nf * (nf * dxh - sum_dxh - xrow[j] * sum_dxh_xh);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * mask[k];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Max-subtracted softmax; `-inf` entries map to 0. Returns `None` when every
/// entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Option<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
    Some(())
}

#[allow(clippy::too_many_arguments)]
fn gat_backward(
    dout: &[f64],
    wh: &[f64],
    attn: &[f64],
    (rows, width): (usize, usize),
    heads: usize,
    nbrs: &Neighborhoods,
    slope: f64,
    alpha: &[f64],
    pre: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = nbrs.n_nodes();
    let dh = width / heads;
    let mut d_wh = vec![0.0; wh.len()];
    let mut d_attn = vec![0.0; attn.len()];
    let mut ds_src = vec![0.0; n];
    let mut ds_dst = vec![0.0; n];
    let mut dalpha = Vec::new();
    for g in 0..rows / n {
        for h in 0..heads {
            ds_src.fill(0.0);
            ds_dst.fill(0.0);
            let col = |v: usize| (g * n + v) * width + h * dh;
            let base = (g * heads + h) * nbrs.total;
            for v in 0..n {
                let list = &nbrs.lists[v];
                let off = base + nbrs.offsets[v];
                let al = &alpha[off..off + list.len()];
                let z = &pre[off..off + list.len()];
                let go = &dout[col(v)..col(v) + dh];
                dalpha.clear();
                for (k, &u) in list.iter().enumerate() {
                    let cu = col(u);
                    dalpha.push(dot(go, &wh[cu..cu + dh]));
                    for c in 0..dh {
                        d_wh[cu + c] += al[k] * go[c];
                    }
                }
                let s = dot(al, &dalpha);
                for (k, &u) in list.iter().enumerate() {
                    let slope_k = if z[k] > 0.0 { 1.0 } else { slope };
                    let de = al[k] * (dalpha[k] - s) * slope_k;
                    ds_src[v] += de;
                    ds_dst[u] += de;
                }
            }
            let a_off = h * 2 * dh;
            for v in 0..n {
                let cv = col(v);
                for c in 0..dh {
                    d_wh[cv + c] += ds_src[v] * attn[a_off + c] + ds_dst[v] * attn[a_off + dh + c];
                    d_attn[a_off + c] += ds_src[v] * wh[cv + c];
                    d_attn[a_off + dh + c] += ds_dst[v] * wh[cv + c];
                }
            }
        }
    }
    (d_wh, d_attn)
}
