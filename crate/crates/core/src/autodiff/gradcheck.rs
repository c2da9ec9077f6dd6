//! Central-difference gradient checking.
//!
//! Discrete decisions inside `f` (top-K routing) must be held fixed by the
//! caller across evaluations; the check is only meaningful away from their
//! switching boundaries.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result of [`grad_check`] with the worst coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum over all coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, eps).map(|r| r.max_rel_err)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor], input: usize, coord: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).map_err(|e| match e {
            Error::NonFinite { .. } => Error::GradCheckNonFinite { input, coord },
            other => other,
        })?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::GradCheckNonFinite { input, coord })
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for c in 0..inputs[i].len() {
            let orig = inputs[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval(&work, i, c)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval(&work, i, c)?;
            work[i].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_coord: c,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
