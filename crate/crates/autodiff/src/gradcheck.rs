//! Central finite-difference gradient checks in f64.

use crate::graph::{Graph, Result, Var};
use crate::tensor::Tensor;

/// Agreement between analytic and numeric gradients for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, or the
    /// absolute difference when both norms are below `1e-10`.
    pub rel_error: f64,
    pub numeric_norm: f64,
}

/// Relative error between two gradient vectors (norm-wise).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Checks `d build(inputs) / d inputs` against central differences with
/// step `h`. `build` must return a scalar and be a pure function of the
/// input values.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut vals = inputs.to_vec();
        for (i, n) in numeric.iter_mut().enumerate() {
            let x0 = vals[k].data[i];
            vals[k].data[i] = x0 + h;
            let fp = eval(&vals)?;
            vals[k].data[i] = x0 - h;
            let fm = eval(&vals)?;
            vals[k].data[i] = x0;
            *n = (fp - fm) / (2.0 * h);
        }
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        report.push(GradCheck { rel_error: relative_error(&analytic, &numeric), numeric_norm: nn });
    }
    Ok(report)
}
