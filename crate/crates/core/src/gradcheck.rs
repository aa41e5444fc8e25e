//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of `f` at `x` against
/// `(f(x+eps) - f(x-eps)) / (2 eps)` element by element.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`;
/// the check passes iff the maximum over elements is below `tol`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    let fx = g.value(y).item();
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {fx}")));
    }
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let y = f(&mut g, v)?;
        let out = g.value(y).item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite(format!("f(x ± eps) = {out}")))
        }
    };

    let mut report = CheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        tol,
        passed: false,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
