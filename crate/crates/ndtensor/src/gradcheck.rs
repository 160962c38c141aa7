//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it does not share
//! any code path with the backward rules it verifies.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central differences.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item().ok_or_else(|| TensorError::NotScalar {
            shape: tape.value(out).shape().to_vec(),
        })
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let base = input.data()[e];
            work[i].data_mut()[e] = base + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = base - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i][e], numeric);
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst = (i, e);
                report.analytic = analytic[i][e];
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
