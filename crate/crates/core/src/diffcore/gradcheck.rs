use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest and smallest accepted central-difference step.
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the analytic gradient returned by `f` and
/// the central difference `(f(p+εeᵢ) - f(p-εeᵢ)) / 2ε` over every coordinate.
///
/// `f` maps a parameter tensor to `(value, analytic gradient)`. It is called
/// twice on the unperturbed input first; differing values are reported as
/// [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    finite_diff_report(f, params, eps).map(|r| r.max_rel_error)
}

pub fn finite_diff_report<F>(mut f: F, params: &Tensor, eps: f64) -> Result<FiniteDiffReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    let (first, grad) = f(params)?;
    let (second, _) = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if grad.shape() != params.shape() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            lhs: params.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }

    let mut report: Option<FiniteDiffReport> = None;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad.data()[i];
        let err = relative_error(analytic, numeric);
        if report.as_ref().is_none_or(|r| err > r.max_rel_error) {
            report = Some(FiniteDiffReport {
                max_rel_error: err,
                worst_index: i,
                analytic,
                numeric,
            });
        }
    }
    let report = report.expect("tensors are never empty");
    Ok(report)
}
