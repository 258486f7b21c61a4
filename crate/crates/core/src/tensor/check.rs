use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Guard added to the analytic magnitude in the relative error.
pub const FD_EPSILON: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / (|analytic_i| + ε)`.
///
/// `f` builds the scalar output on the supplied graph from the input node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).expect("input is tracked").into_owned();

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        let v = g
            .value(y)
            .item()
            .ok_or_else(|| Error::Usage("finite-difference target must be scalar".into()))?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "finite-difference oracle saw non-finite value {v}"
            )));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + FD_EPSILON);
        worst = worst.max(err);
    }
    Ok(worst)
}
