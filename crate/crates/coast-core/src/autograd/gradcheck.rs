//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{CoastError, Result};
use crate::Real;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at every coordinate of `x` and return the maximum
/// relative error `|a - b| / max(|a|, |b|, 1)`.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate, so any
/// internal randomness (dropout masks) has to be re-seeded identically on
/// every call.
pub fn grad_check<F>(f: F, x: &Tensor, step: Real) -> Result<Real>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(CoastError::NonFinite("grad_check input".into()));
    }
    let mut probe = x.clone();
    probe.requires_grad = true;

    let mut tape = Tape::new();
    let xid = tape.leaf(&probe);
    let out = f(&mut tape, xid)?;
    if tape.values(out).len() != 1 {
        return Err(CoastError::InvalidShape("grad_check requires a scalar function".into()));
    }
    if !tape.scalar_value(out).is_finite() {
        return Err(CoastError::NonFinite("grad_check function value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Real> =
        tape.grad(xid).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.values.len()]);

    let eval = |values: &[Real]| -> Result<Real> {
        let t = Tensor::new(x.shape.clone(), values.to_vec())?;
        let mut tape = Tape::new();
        let id = tape.leaf(&t);
        let out = f(&mut tape, id)?;
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(CoastError::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    let mut max_rel: Real = 0.0;
    let mut perturbed = x.values.clone();
    for i in 0..perturbed.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + step;
        let fp = eval(&perturbed)?;
        perturbed[i] = orig - step;
        let fm = eval(&perturbed)?;
        perturbed[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
