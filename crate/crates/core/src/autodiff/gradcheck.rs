use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

/// Outcome of comparing an analytic gradient against central finite
/// differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
    /// True when a hinge argument was sampled within `step` of its kink,
    /// where finite differences are unreliable.
    pub kink_near: bool,
}

/// Check the analytic gradient of a scalar-valued function at `x`.
///
/// The relative error per coordinate is |a − n| / max(|a|, |n|, 1) and the
/// report passes iff the maximum over coordinates is ≤ `tol`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let probe = Tensor::param(x.values().to_vec(), x.shape())?;
    let tape = Tape::new();
    let out = f(&tape, &probe)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    tape.backward(&out)?;
    let kink_near = tape.relu_kink_within(step);
    let analytic = probe.grad().expect("probe requires grad");

    let eval = |values: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(values, x.shape())?;
        let tape = Tape::no_grad();
        f(&tape, &t)?.item()
    };

    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.values().to_vec();
        plus[i] += step;
        let mut minus = x.values().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        step,
        tol,
        passed: max_rel_err <= tol,
        kink_near,
    })
}
