//! Central finite-difference checks against the tape's analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

/// Elementwise relative error with a small absolute floor so exact zeros
/// compare sensibly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `d f / d inputs` from [`Tape::backward`] against central
/// differences with step `h`. When `stride > 1` only every `stride`-th
/// coordinate of each input is perturbed.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in (0..inputs[i].numel()).step_by(stride.max(1)) {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic[k], numeric));
            report.max_abs_err = report.max_abs_err.max((analytic[k] - numeric).abs());
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
