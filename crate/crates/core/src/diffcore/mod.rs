//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse once to produce gradients for all
//! differentiable leaves. Recurrences unrolled on one tape therefore get
//! backpropagation through time for free.

mod activation;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use activation::{Activation, Elementwise};
pub use gradcheck::{finite_diff_check, finite_diff_report, relative_error, FiniteDiffReport, EPS_RANGE};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{softmax_in_place, Neighborhoods};
