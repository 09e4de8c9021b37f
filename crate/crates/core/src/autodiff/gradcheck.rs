//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude a gradient is compared absolutely rather than
/// relatively, so exactly-zero gradients do not divide by zero.
pub const ABS_FLOOR: f64 = 1e-6;

/// Worst per-coordinate discrepancy between two gradient vectors: relative
/// error where either side exceeds [`ABS_FLOOR`], absolute error otherwise.
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < ABS_FLOOR {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Checks the tape gradient of a scalar function `f` at `x` against central
/// differences with step `h`, returning the worst error (see [`compare_grads`]).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |values: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let input = Tensor::new(x.shape().to_vec(), values.to_vec())?;
        let y = f(&tape, tape.constant(&input))?;
        scalar_of(y)
    };

    let tape = Tape::new();
    let input = tape.leaf(&x.clone().with_requires_grad());
    let y = f(&tape, input)?;
    scalar_of(y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zero(input);
    let numeric = central_difference(x.data(), h, eval)?;
    Ok(compare_grads(&analytic, &numeric))
}

fn scalar_of(y: Var<'_>) -> Result<f64> {
    if y.numel() != 1 {
        return Err(Error::dim("grad_check", format!("function must be scalar, got {:?}", y.shape())));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check output".into()));
    }
    Ok(v)
}
