//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Largest admissible finite-difference step.
pub const MAX_STEP: f64 = 1e-3;

/// Compares the tape gradient of `builder` at `point` against central
/// differences with step `step`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(builder: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0 && step <= MAX_STEP) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: step {step} outside (0, {MAX_STEP}]"
        )));
    }
    let tape = Tape::new();
    let leaves: Vec<Tensor> = point.iter().map(|p| tape.leaf(p)).collect();
    let out = builder(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::NotScalar(out.shape().to_vec()));
    }
    let grads = tape.backward(&out)?;

    let mut worst = 0.0f64;
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        for coord in 0..point[idx].numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut args: Vec<Tensor> = point.iter().map(Tensor::detach).collect();
                let mut v = args[idx].to_vec();
                v[coord] += delta;
                args[idx] = Tensor::new(args[idx].shape().to_vec(), v)?;
                Ok(builder(&args)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let err = (analytic.data()[coord] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
