//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-12;

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference derivative of `f` along every coordinate of `x`.
pub fn central_difference<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at coordinate {i}: f(x+eps)={up}, f(x-eps)={down}"
            )));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest coordinate-wise relative error.
///
/// `build` receives a fresh graph and the input node and must return a
/// scalar node.
pub fn grad_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = build(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let numeric = central_difference(
        |probe| {
            let mut g = Graph::new();
            let xv = g.constant(probe.clone());
            let out = build(&mut g, xv)?;
            Ok(g.value(out).data()[0])
        },
        x,
        eps,
    )?;

    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
