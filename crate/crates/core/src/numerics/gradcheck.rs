//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the reverse sweep it is checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors on near-zero gradients.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences of step `step` on every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut data = input.to_vec();
            data[j] = input.data()[j] + step;
            probe[i] = Tensor::new(input.shape().to_vec(), data.clone())?;
            let up = eval(&probe)?;
            data[j] = input.data()[j] - step;
            probe[i] = Tensor::new(input.shape().to_vec(), data)?;
            let down = eval(&probe)?;
            probe[i] = input.clone();

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric);
            report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
