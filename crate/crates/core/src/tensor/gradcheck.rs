use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
///
/// `f` receives a fresh graph and the registered point on every evaluation.
pub fn grad_check<F>(mut f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidConfig(format!("grad_check step {h} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let x = g.leaf(&point.clone().with_requires_grad(true));
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let mut eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(point.shape(), values, false)?;
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
