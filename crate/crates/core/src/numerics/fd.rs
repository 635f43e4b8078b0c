//! Central finite differences, the independent oracle every analytic
//! backward in this crate is audited against.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(|b|_inf, floor)` -- relative error of an
/// analytic gradient against its finite-difference reference, normalized
/// by the reference's dominant magnitude.
pub fn max_rel_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    let scale = reference.max_abs().max(1e-8);
    analytic.max_abs_diff(reference) / scale
}
