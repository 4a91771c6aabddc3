//! Vanilla RNN, LSTM and GRU cells, and their unrolling over a sequence.
//!
//! Gate weights are stored in the concatenated form `W · [h_prev, x]`, i.e.
//! as `hidden × (hidden + input)` matrices whose first `hidden` columns act on
//! the previous state. Every step works on row batches: `h_prev` is `M×h` and
//! `x` is `M×d`, with a single sequence being the `M = 1` case.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;

/// `φ(W_h [h_prev, x] + b_h)` and the output projection `ψ(W_y h + b_y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnCellParams<T = Tensor> {
    pub w_h: T,
    pub b_h: T,
    pub w_y: T,
    pub b_y: T,
    pub phi: Activation,
    pub psi: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams<T = Tensor> {
    pub w_f: T,
    pub w_i: T,
    pub w_c: T,
    pub w_o: T,
    pub b_f: T,
    pub b_i: T,
    pub b_c: T,
    pub b_o: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCellParams<T = Tensor> {
    pub w_z: T,
    pub w_r: T,
    pub w_h: T,
    pub b_z: T,
    pub b_r: T,
    pub b_h: T,
}

fn gate_weight<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Tensor {
    glorot_uniform(&[hidden, hidden + input], hidden + input, hidden, rng)
}

impl RnnCellParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        RnnCellParams {
            w_h: gate_weight(hidden, input, rng),
            b_h: Tensor::zeros(vec![hidden]),
            w_y: glorot_uniform(&[output, hidden], hidden, output, rng),
            b_y: Tensor::zeros(vec![output]),
            phi: Activation::Tanh,
            psi: Activation::Identity,
        }
    }
}

impl LstmCellParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmCellParams {
            w_f: gate_weight(hidden, input, rng),
            w_i: gate_weight(hidden, input, rng),
            w_c: gate_weight(hidden, input, rng),
            w_o: gate_weight(hidden, input, rng),
            b_f: Tensor::zeros(vec![hidden]),
            b_i: Tensor::zeros(vec![hidden]),
            b_c: Tensor::zeros(vec![hidden]),
            b_o: Tensor::zeros(vec![hidden]),
        }
    }
}

impl GruCellParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruCellParams {
            w_z: gate_weight(hidden, input, rng),
            w_r: gate_weight(hidden, input, rng),
            w_h: gate_weight(hidden, input, rng),
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCellParams {
            w_z: Tensor::zeros(vec![hidden, hidden + input]),
            w_r: Tensor::zeros(vec![hidden, hidden + input]),
            w_h: Tensor::zeros(vec![hidden, hidden + input]),
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }
}

macro_rules! param_fields {
    ($ty:ident { $($field:ident),* } $(, $copy:ident)*) => {
        impl<T> $ty<T> {
            pub fn map<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
            ) -> Result<$ty<U>, E> {
                Ok($ty {
                    $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)?,)*
                    $($copy: self.$copy,)*
                })
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

param_fields!(RnnCellParams { w_h, b_h, w_y, b_y }, phi, psi);
param_fields!(LstmCellParams { w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o });
param_fields!(GruCellParams { w_z, w_r, w_h, b_z, b_r, b_h });

/// `act(W [h, x] + b)` with `W` stored as `out × (h + d)`.
fn gate(tape: &mut Tape, w: Var, b: Var, input: Var, act: Activation) -> Result<Var> {
    let pre = tape.matmul_nt(input, w)?;
    let pre = tape.add_bias(pre, b)?;
    tape.activate(pre, act)
}

/// Feedforward layer `act(x W + b)` with `W` stored as `d_in × d_out`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
    let mut out = tape.matmul(x, w)?;
    if let Some(b) = b {
        out = tape.add_bias(out, b)?;
    }
    tape.activate(out, act)
}

/// Returns `(h, y)`.
pub fn rnn_cell_step(tape: &mut Tape, p: &RnnCellParams<Var>, h_prev: Var, x: Var) -> Result<(Var, Var)> {
    let hx = tape.concat_cols(&[h_prev, x])?;
    let h = gate(tape, p.w_h, p.b_h, hx, p.phi)?;
    let y = gate(tape, p.w_y, p.b_y, h, p.psi)?;
    Ok((h, y))
}

/// Returns `(h, c)`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    p: &LstmCellParams<Var>,
    h_prev: Var,
    c_prev: Var,
    x: Var,
) -> Result<(Var, Var)> {
    let hx = tape.concat_cols(&[h_prev, x])?;
    let f = gate(tape, p.w_f, p.b_f, hx, Activation::Sigmoid)?;
    let i = gate(tape, p.w_i, p.b_i, hx, Activation::Sigmoid)?;
    let c_tilde = gate(tape, p.w_c, p.b_c, hx, Activation::Tanh)?;
    let kept = tape.mul(f, c_prev)?;
    let added = tape.mul(i, c_tilde)?;
    let c = tape.add(kept, added)?;
    let o = gate(tape, p.w_o, p.b_o, hx, Activation::Sigmoid)?;
    let c_act = tape.activate(c, Activation::Tanh)?;
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}

/// `h = (1 - z) ⊙ h_prev + z ⊙ h̃`, with the reset gate applied to `h_prev`
/// inside the candidate.
pub fn gru_cell_step(tape: &mut Tape, p: &GruCellParams<Var>, h_prev: Var, x: Var) -> Result<Var> {
    let hx = tape.concat_cols(&[h_prev, x])?;
    let z = gate(tape, p.w_z, p.b_z, hx, Activation::Sigmoid)?;
    let r = gate(tape, p.w_r, p.b_r, hx, Activation::Sigmoid)?;
    let reset = tape.mul(r, h_prev)?;
    let rx = tape.concat_cols(&[reset, x])?;
    let candidate = gate(tape, p.w_h, p.b_h, rx, Activation::Tanh)?;
    let keep = tape.one_minus(z)?;
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, candidate)?;
    tape.add(old, new)
}

/// Recurrent state carried between steps. `c` is present only for LSTM cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Var,
    pub c: Option<Var>,
}

impl HiddenState {
    /// All-zero state for `rows` sequences; `with_cell` adds an LSTM cell state.
    pub fn zeros(tape: &mut Tape, rows: usize, hidden: usize, with_cell: bool) -> Self {
        let h = tape.constant(Tensor::zeros(vec![rows, hidden]));
        let c = with_cell.then(|| tape.constant(Tensor::zeros(vec![rows, hidden])));
        HiddenState { h, c }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Cell<'a> {
    Rnn(&'a RnnCellParams<Var>),
    Lstm(&'a LstmCellParams<Var>),
    Gru(&'a GruCellParams<Var>),
}

/// Applies the cell to `inputs[0], inputs[1], ...` in order and returns the
/// hidden state after every step. All steps share one tape, so a backward
/// pass from any function of the outputs is backpropagation through time.
pub fn unroll(tape: &mut Tape, cell: Cell<'_>, inputs: &[Var], h0: HiddenState) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::invalid("cannot unroll an empty sequence"));
    }
    let is_lstm = matches!(cell, Cell::Lstm(_));
    if h0.c.is_some() != is_lstm {
        return Err(Error::invalid("cell state must be present exactly for LSTM cells"));
    }
    let mut state = h0;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = match cell {
            Cell::Rnn(p) => HiddenState {
                h: rnn_cell_step(tape, p, state.h, x)?.0,
                c: None,
            },
            Cell::Gru(p) => HiddenState {
                h: gru_cell_step(tape, p, state.h, x)?,
                c: None,
            },
            Cell::Lstm(p) => {
                let c_prev = state.c.expect("checked above");
                let (h, c) = lstm_cell_step(tape, p, state.h, c_prev, x)?;
                HiddenState { h, c: Some(c) }
            }
        };
        out.push(state.h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constants<P>(tape: &mut Tape, map: impl FnOnce(&mut dyn FnMut(&str, &Tensor) -> Result<Var>) -> Result<P>) -> P {
        map(&mut |_, t| Ok(tape.constant(t.clone()))).unwrap()
    }

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn rnn_zero_params_give_zero_state() {
        let mut tape = Tape::new();
        let mut p = RnnCellParams::init(2, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
        p.visit_mut("rnn", &mut |_, t| t.data_mut().fill(0.0));
        let p = constants(&mut tape, |f| p.map("rnn", f));
        let h0 = row(&mut tape, &[0.3, -0.1, 0.5]);
        let x = row(&mut tape, &[4.0, -2.0]);
        let (h, y) = rnn_cell_step(&mut tape, &p, h0, x).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[1, 1]);
    }

    #[test]
    fn rnn_bias_only_with_identity() {
        let mut tape = Tape::new();
        let mut p = RnnCellParams::init(2, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
        p.w_h.data_mut().fill(0.0);
        p.b_h = Tensor::vector(vec![0.25, -1.5, 2.0]).unwrap();
        p.phi = Activation::Identity;
        let p = constants(&mut tape, |f| p.map("rnn", f));
        let h0 = row(&mut tape, &[0.3, -0.1, 0.5]);
        let x = row(&mut tape, &[4.0, -2.0]);
        let (h, _) = rnn_cell_step(&mut tape, &p, h0, x).unwrap();
        assert_eq!(tape.value(h).data(), &[0.25, -1.5, 2.0]);
    }

    #[test]
    fn rnn_without_recurrent_block_is_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, h) = (3, 4);
        let mut p = RnnCellParams::init(d, h, 2, &mut rng);
        let mut w_x = Tensor::zeros(vec![d, h]);
        for i in 0..h {
            for j in 0..h + d {
                if j < h {
                    p.w_h.set(&[i, j], 0.0);
                } else {
                    w_x.set(&[j - h, i], p.w_h.at(&[i, j]));
                }
            }
        }
        p.b_h = Tensor::vector(vec![0.1, 0.2, -0.3, 0.0]).unwrap();
        let mut tape = Tape::new();
        let b = tape.constant(p.b_h.clone());
        let p = constants(&mut tape, |f| p.map("rnn", f));
        let h0 = row(&mut tape, &[0.9, -0.4, 0.3, 0.2]);
        let x = row(&mut tape, &[0.5, -1.0, 2.0]);
        let (hr, _) = rnn_cell_step(&mut tape, &p, h0, x).unwrap();
        let wx = tape.constant(w_x);
        let dense = dense_forward(&mut tape, x, wx, Some(b), Activation::Tanh).unwrap();
        assert!(tape.value(hr).max_abs_diff(tape.value(dense)) < 1e-15);
    }

    #[test]
    fn lstm_zero_params() {
        let mut tape = Tape::new();
        let mut p = LstmCellParams::init(2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        p.visit_mut("lstm", &mut |_, t| t.data_mut().fill(0.0));
        let p = constants(&mut tape, |f| p.map("lstm", f));
        let x = row(&mut tape, &[1.0, -1.0]);
        let h0 = row(&mut tape, &[0.2, 0.4, -0.6]);
        let c_vals = [1.0, -2.0, 0.5];
        let c0 = row(&mut tape, &c_vals);
        let (h, c) = lstm_cell_step(&mut tape, &p, h0, c0, x).unwrap();
        for k in 0..3 {
            assert_eq!(tape.value(c).data()[k], 0.5 * c_vals[k]);
            assert_eq!(tape.value(h).data()[k], 0.5 * (0.5 * c_vals[k]).tanh());
        }
        let zero = row(&mut tape, &[0.0; 3]);
        let (h, c) = lstm_cell_step(&mut tape, &p, h0, zero, x).unwrap();
        assert!(tape.value(h).data().iter().chain(tape.value(c).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gru_zero_params_halve_the_state() {
        let mut tape = Tape::new();
        let p = GruCellParams::zeros(2, 3);
        let p = constants(&mut tape, |f| p.map("gru", f));
        let v = [0.8, -0.4, 3.0];
        let h0 = row(&mut tape, &v);
        let x = row(&mut tape, &[1.0, 2.0]);
        let h = gru_cell_step(&mut tape, &p, h0, x).unwrap();
        assert_eq!(tape.value(h).data(), &[0.4, -0.2, 1.5]);

        let zero = row(&mut tape, &[0.0; 3]);
        let h = gru_cell_step(&mut tape, &p, zero, x).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

        let xs: Vec<Var> = (0..6).map(|_| x).collect();
        let hs = unroll(&mut tape, Cell::Gru(&p), &xs, HiddenState { h: h0, c: None }).unwrap();
        for (t, &ht) in hs.iter().enumerate() {
            let div = 2f64.powi(t as i32 + 1);
            for k in 0..3 {
                assert_eq!(tape.value(ht).data()[k], v[k] / div);
            }
        }
    }

    #[test]
    fn unroll_single_step_matches_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let p = GruCellParams::init(2, 3, &mut rng);
        let p = constants(&mut tape, |f| p.map("gru", f));
        let h0 = row(&mut tape, &[0.1, 0.2, 0.3]);
        let x = row(&mut tape, &[-0.5, 0.7]);
        let single = gru_cell_step(&mut tape, &p, h0, x).unwrap();
        let hs = unroll(&mut tape, Cell::Gru(&p), &[x], HiddenState { h: h0, c: None }).unwrap();
        assert!(tape.value(hs[0]).bit_eq(tape.value(single)));
    }

    #[test]
    fn unroll_rejects_bad_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let p = LstmCellParams::init(2, 3, &mut rng);
        let p = constants(&mut tape, |f| p.map("lstm", f));
        let state = HiddenState::zeros(&mut tape, 1, 3, false);
        let x = row(&mut tape, &[1.0, 1.0]);
        assert!(unroll(&mut tape, Cell::Lstm(&p), &[x], state).is_err());
        let state = HiddenState::zeros(&mut tape, 1, 3, true);
        assert!(unroll(&mut tape, Cell::Lstm(&p), &[], state).is_err());
        assert_eq!(unroll(&mut tape, Cell::Lstm(&p), &[x, x], state).unwrap().len(), 2);
    }
}
