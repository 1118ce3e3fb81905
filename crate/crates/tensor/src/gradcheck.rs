//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true
/// gradient is (near) zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `step`, perturbing every entry of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(TensorError::invalid("gradcheck", out.shape(), "scalar output required"));
        }
        Ok(out.item())
    };

    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..work[idx].len() {
            let orig = work[idx].data()[e];
            work[idx].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_input,
        max_rel_error,
    })
}
