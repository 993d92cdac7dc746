//! Finite-difference gradient verification.

use super::tensor::{Real, Tensor};

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_gradient<R, F>(f: &mut F, x: &Tensor<R>, eps: R) -> Tensor<R>
where
    R: Real,
    F: FnMut(&Tensor<R>) -> R,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (eps + eps);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference noise floor: disagreements this small are treated
/// as numerically zero rather than relative-error failures.
pub const FD_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error among elements above [`FD_ABS_FLOOR`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Compare an analytic gradient against central differences of `f` at `x`.
pub fn grad_check<R, F>(
    f: &mut F,
    x: &Tensor<R>,
    analytic: &Tensor<R>,
    eps: R,
) -> GradCheckReport
where
    R: Real,
    F: FnMut(&Tensor<R>) -> R,
{
    assert_eq!(
        x.shape(),
        analytic.shape(),
        "grad_check shape mismatch: {:?} vs {:?}",
        x.shape(),
        analytic.shape()
    );
    let numeric = numeric_gradient(f, x, eps);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: x.numel(),
    };
    for i in 0..x.numel() {
        let (a, n) = (analytic.data()[i].to_f64(), numeric.data()[i].to_f64());
        let ae = (a - n).abs();
        if ae > report.max_abs_err {
            report.max_abs_err = ae;
        }
        if ae <= FD_ABS_FLOOR {
            continue;
        }
        let re = rel_err(a, n);
        if re > report.max_rel_err {
            report.max_rel_err = re;
            report.worst_index = i;
        }
    }
    report
}
