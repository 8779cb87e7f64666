//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Relative error floor used in the denominator.
const REL_FLOOR: f64 = 1e-8;
/// Rounding error of one objective evaluation, in units of `eps * |f|`.
const ROUNDOFF_ULPS: f64 = 4.0;

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns the worst relative error over all coordinates.
///
/// Disagreements smaller than the difference quotient can resolve,
/// `4 * f64::EPSILON * max(|f(x)|, 1) / eps`, count as zero error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_many(f, std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    let (value, analytic): (f64, Vec<Tensor<f64>>) = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let value = loss.item()?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (value, grads)
    };
    let resolution = ROUNDOFF_ULPS * f64::EPSILON * value.abs().max(1.0) / eps;
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut coord = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check input {which}: analytic {a}, numeric {numeric}"),
                    coordinate: coord,
                });
            }
            let diff = (a - numeric).abs();
            let rel = if diff <= resolution {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(REL_FLOOR)
            };
            worst = worst.max(rel);
            coord += 1;
        }
    }
    Ok(worst)
}
