//! Central finite-difference verification of analytic gradients.

use super::array::DiffArray;
use super::graph::{Graph, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Denominator floor; gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the gradient of `f` at `inputs` against central differences
/// with step `h`. `f` must build a scalar from the supplied leaves.
pub fn check<F>(inputs: &[DiffArray], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| g.input(a.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| g.grad(v).unwrap_or_else(|| vec![0.0; a.len()]))
        .collect();

    let eval = |perturbed: &[DiffArray]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let mut work: Vec<DiffArray> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k][i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.max_rel_err = report.max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
            report.checked += 1;
        }
    }
    Ok(report)
}
