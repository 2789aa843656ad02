//! Central finite-difference checks of tape gradients.

use super::{Gradients, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum was attained.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the tape's reverse-mode gradients of `f` against central
/// differences, perturbing every scalar of every parameter in turn.
///
/// `f` builds a fresh forward pass on the given tape and returns the scalar
/// loss node. It is called `1 + 2·N` times for `N` scalars, so it must be
/// deterministic.
pub fn finite_difference_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_grads(params, &f)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };

    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

pub fn analytic_grads<F>(params: &ParamStore, f: &F) -> Result<Gradients>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}
