//! Central finite-difference check of reverse-mode gradients, run in `f64`.

use super::graph::{Graph, Trace, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], replay: Option<&Trace<f64>>) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = match replay {
        Some(t) => Graph::replaying(t.clone()),
        None => Graph::recording(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar-valued op, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Outcome of a gradient check, with the worst coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum over every input coordinate of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`, where the
/// numeric derivative is the central difference with step `eps`.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate.
/// Those re-evaluations replay the unperturbed point's [`Trace`]: detached
/// tensors stay fixed and non-smooth ops stay on the same piece, so the
/// check measures the gradient the backward pass is meant to compute even
/// when a kink lies within `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, eps)?.max_rel_error)
}

/// [`grad_check`] returning where the worst error occurred.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, false)
}

/// Like [`grad_check_report`]; with `extrapolate` the numeric derivative is
/// the Richardson combination `(4·D(eps/2) − D(eps)) / 3` of two central
/// differences, whose truncation error is `O(eps⁴)` instead of `O(eps²)`.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], eps: f64, extrapolate: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let (mut g, vars, out) = evaluate(&f, inputs, None)?;
    let trace = g.take_trace().unwrap_or_default();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut central = |h: f64| -> Result<f64> {
                let base = input.data()[j];
                work[i].data_mut()[j] = base + h;
                let (gp, _, op) = evaluate(&f, &work, Some(&trace))?;
                let fp = gp.value(op).item();
                work[i].data_mut()[j] = base - h;
                let (gm, _, om) = evaluate(&f, &work, Some(&trace))?;
                let fm = gm.value(om).item();
                work[i].data_mut()[j] = base;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = if extrapolate {
                let coarse = central(eps)?;
                let fine = central(eps / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                central(eps)?
            };
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
