//! Central-difference verification of tape adjoints (64-bit only).

use crate::error::{Error, Result};
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Flat coordinates to probe; `None` probes every coordinate.
    pub coords: Option<Vec<usize>>,
    /// Adjoint fault forwarded to the analytic tape (test hook).
    pub fault: Option<Primitive>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over probed coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of the scalar function `f` at `point`
/// against central differences.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new().with_adjoint_fault(opts.fault);
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let full_grad = match tape.grad(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; point.numel()],
    };
    drop(tape);

    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..point.numel()).collect(),
    };
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).data()[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &c in &coords {
        let mut plus = point.clone();
        plus.data_mut()[c] += opts.eps;
        let mut minus = point.clone();
        minus.data_mut()[c] -= opts.eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.eps);
        let analytic = full_grad[c];
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Verification(format!(
                "non-finite gradient at coordinate {c}: analytic {analytic}, numeric {numeric}"
            )));
        }
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_coordinate = c;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
