use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Largest relative discrepancy between the reverse-mode gradient of `f` at
/// `x` and its central finite-difference estimate with step `step`.
///
/// The relative error of one element is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let root = f(&mut g, v)?;
        let y = g.value(root).item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {y}")));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let root = f(&mut g, v)?;
    let y = g.value(root).item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y}")));
    }
    g.backward(root)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
