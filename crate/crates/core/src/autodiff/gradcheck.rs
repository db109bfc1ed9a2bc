//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for the scalar function `f` at `x`, using central differences of step `eps`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: Real) -> Result<Real>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<Real> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut worst: Real = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite("gradient check".into()));
        }
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
