//! Central finite-difference verification of autodiff gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;
/// One-sided slopes disagreeing by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink there.
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Rank("grad_check needs a scalar-valued function".into()));
    }
    Ok(g.value(out).item())
}

/// Compares the autodiff gradient of scalar `f` with respect to every
/// coordinate of every input against central differences with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|gr| gr.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let base = eval(&f, inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tol,
        passed: true,
    };
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let x0 = t.data()[ci];
            work[ti].data_mut()[ci] = x0 + eps;
            let up = eval(&f, &work)?;
            work[ti].data_mut()[ci] = x0 - eps;
            let down = eval(&f, &work)?;
            work[ti].data_mut()[ci] = x0;

            let fwd = (up - base) / eps;
            let bwd = (base - down) / eps;
            if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                report.excluded += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((ti, ci));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
