use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

/// Check `f`'s reverse-mode gradient at `point` against central finite
/// differences with step `step`.
///
/// `f` receives a fresh graph and the leaf holding the input and must return
/// a single-element node. It is re-evaluated `2 * point.len() + 1` times.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("grad_check step must be positive, got {step}")));
    }
    if let Some(i) = point.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("input coordinate {i} is {}", point.data()[i])));
    }

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let base = g.value(y).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("function value {base} at the base point")));
    }
    let analytic = g.backward(y)?.wrt(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates: point.len(),
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {a}, finite difference {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}
