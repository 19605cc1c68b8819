//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it is independent of the
//! backward rules it validates.

use super::{Graph, RealMatrix, Var};
use crate::error::Result;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest element-wise relative error over all inputs.
    pub max_rel_err: f64,
    /// Number of entries compared.
    pub entries: usize,
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Builds the graph once with all `inputs` as parameters, runs backward, then
/// perturbs each input entry by `±step` and compares with the central
/// difference of the scalar output.
pub fn check_gradients<F>(inputs: &[RealMatrix], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[RealMatrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<RealMatrix> = vars.iter().map(|&v| g.grad(v).clone()).collect();

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work: Vec<RealMatrix> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grad.data()[e], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}
