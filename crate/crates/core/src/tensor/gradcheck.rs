//! Central-difference gradient checking.
//!
//! `f` rebuilds the full forward pass from scratch on every call, so the
//! numeric gradient probes exactly the function the tape differentiates.
//! Used by unit tests for every op and by the acceptance suite.

use super::Tensor;
use crate::error::Result;

/// Numeric gradient of a scalar function at `params`, one central
/// difference per coordinate.
pub fn central_difference<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst elementwise relative error between two gradient sets. The
/// denominator is floored at 1e-6 so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Runs `f` through both the tape (via `analytic`) and central differences,
/// returning the worst relative error. `h` of 1e-6 suits f64 throughout.
pub fn check<F>(f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let numeric = central_difference(f, params, h)?;
    Ok(max_rel_error(analytic, &numeric))
}
