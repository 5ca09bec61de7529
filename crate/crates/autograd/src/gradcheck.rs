//! Central finite-difference verification of analytic gradients.

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Relative error with a unit floor on the denominator, so coordinates with
/// near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| AutogradError::NonScalarLoss(g.shape(out).to_vec()))
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Check every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    gradcheck_probed(f, inputs, &probes, h)
}

/// Check only the listed (input, coordinate) pairs; used for models whose
/// full parameter count makes exhaustive differencing too slow.
pub fn gradcheck_probed<F>(
    f: F,
    inputs: &[Tensor],
    probes: &[(usize, usize)],
    h: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &(i, j) in probes {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let fp = eval_scalar(&f, &work)?;
        work[i].data_mut()[j] = x0 - h;
        let fm = eval_scalar(&f, &work)?;
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(grads[i].data()[j], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
