//! Scalar-loop reference implementations, written from the cell and layer
//! equations without the tape, plus small helpers shared by test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signgru::diffcore::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W · [h, x] + b` for one row, `W` being `out × (|h| + |x|)`.
fn affine(w: &Mat, b: &[f64], h: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bias)| {
            let mut acc = *bias;
            for (k, v) in h.iter().chain(x).enumerate() {
                acc += row[k] * v;
            }
            acc
        })
        .collect()
}

/// `h = tanh(W_h [h_prev, x] + b_h)`, `y = W_y h + b_y`.
pub fn rnn_step(w_h: &Mat, b_h: &[f64], w_y: &Mat, b_y: &[f64], h_prev: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = affine(w_h, b_h, h_prev, x).into_iter().map(f64::tanh).collect();
    let y = affine(w_y, b_y, &h, &[]);
    (h, y)
}

pub struct Lstm {
    pub w: [Mat; 4],
    pub b: [Vec<f64>; 4],
}

/// Gates in order f, i, c̃, o.
pub fn lstm_step(p: &Lstm, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = affine(&p.w[0], &p.b[0], h_prev, x);
    let i = affine(&p.w[1], &p.b[1], h_prev, x);
    let g = affine(&p.w[2], &p.b[2], h_prev, x);
    let o = affine(&p.w[3], &p.b[3], h_prev, x);
    let mut h = vec![0.0; h_prev.len()];
    let mut c = vec![0.0; h_prev.len()];
    for k in 0..h.len() {
        c[k] = sigmoid(f[k]) * c_prev[k] + sigmoid(i[k]) * g[k].tanh();
        h[k] = sigmoid(o[k]) * c[k].tanh();
    }
    (h, c)
}

pub struct Gru {
    pub w_z: Mat,
    pub w_r: Mat,
    pub w_h: Mat,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

pub fn gru_step(p: &Gru, h_prev: &[f64], x: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = affine(&p.w_z, &p.b_z, h_prev, x).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = affine(&p.w_r, &p.b_r, h_prev, x).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = affine(&p.w_h, &p.b_h, &rh, x).into_iter().map(f64::tanh).collect();
    (0..h_prev.len())
        .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * cand[k])
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// `D̂^{-1/2}(A + I)D̂^{-1/2} H W` followed by ReLU.
pub fn gcn_layer(n: usize, edges: &[(usize, usize)], h: &Mat, w: &Mat) -> Mat {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
    }
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    matmul(&matmul(&a, h), w)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Closed neighborhoods as sorted index lists.
pub fn closed_neighbors(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nb: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(u, v) in edges {
        nb[u].push(v);
        nb[v].push(u);
    }
    for l in &mut nb {
        l.sort_unstable();
        l.dedup();
    }
    nb
}

/// One head's coefficients `α_vu = softmax_u∈N(v) LeakyReLU(a_src·Wh_v + a_dst·Wh_u)`,
/// returned as a dense `N×N` matrix.
pub fn gat_alpha(nb: &[Vec<usize>], wh: &Mat, a_src: &[f64], a_dst: &[f64], slope: f64) -> Mat {
    let n = wh.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut alpha = vec![vec![0.0; n]; n];
    for v in 0..n {
        let e: Vec<f64> = nb[v]
            .iter()
            .map(|&u| {
                let s = dot(a_src, &wh[v]) + dot(a_dst, &wh[u]);
                if s > 0.0 {
                    s
                } else {
                    slope * s
                }
            })
            .collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|x| (x - m).exp()).sum();
        for (k, &u) in nb[v].iter().enumerate() {
            alpha[v][u] = (e[k] - m).exp() / z;
        }
    }
    alpha
}

/// Multi-head GAT layer with ELU output, `w` being `d_in × heads·dh` and
/// `attn` being `heads × 2dh`.
pub fn gat_layer(nb: &[Vec<usize>], h: &Mat, w: &Mat, attn: &Mat, heads: usize, slope: f64) -> Mat {
    let n = h.len();
    let width = w[0].len();
    let dh = width / heads;
    let wh_all = matmul(h, w);
    let mut out = vec![vec![0.0; width]; n];
    for k in 0..heads {
        let wh: Mat = wh_all.iter().map(|r| r[k * dh..(k + 1) * dh].to_vec()).collect();
        let alpha = gat_alpha(nb, &wh, &attn[k][..dh], &attn[k][dh..], slope);
        for v in 0..n {
            for u in 0..n {
                for j in 0..dh {
                    out[v][k * dh + j] += alpha[v][u] * wh[u][j];
                }
            }
        }
    }
    out.into_iter()
        .map(|r| r.into_iter().map(|x| if x > 0.0 { x } else { x.exp() - 1.0 }).collect())
        .collect()
}

/// Plain Adam (no weight decay) on flat buffers.
pub fn adam(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= lr * (mh / (vh.sqrt() + eps));
    }
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
