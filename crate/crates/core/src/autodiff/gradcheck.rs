use crate::autodiff::graph::{Graph, LocalReducer, NodeId};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients with central differences.
///
/// `build` must register parameters with [`Graph::param`] by consuming
/// `point` in order and return a scalar loss node. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(mut build: F, point: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[f64]) -> Result<NodeId>,
{
    let mut g = Graph::<f64>::new();
    let root = build(&mut g, point)?;
    let loss = g.value(root).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at probe point".into()));
    }
    g.backward(root, &mut LocalReducer)?;
    let analytic = g.param_grads().values();
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "builder registered {} parameters for a point of length {}",
            analytic.len(),
            point.len()
        )));
    }

    let eval = |build: &mut F, p: &[f64]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let root = build(&mut g, p)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss at perturbed point".into()));
        }
        Ok(v)
    };

    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = eval(&mut build, &probe)?;
        probe[i] = point[i] - h;
        let minus = eval(&mut build, &probe)?;
        probe[i] = point[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
