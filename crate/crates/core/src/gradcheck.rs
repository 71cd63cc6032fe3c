//! Finite-difference gradient checking.
//!
//! These helpers only ever call the *forward* path of whatever loss closure
//! they are given, so they stay independent of the backward implementation
//! they are used to validate. Central differences with step
//! `h·max(1, |x|)` give truncation error O(h²); with the default steps the
//! achievable agreement is far tighter than the tolerances used in tests.

use crate::error::Result;
use crate::tensor::Parameter;
use crate::Elem;

/// Default central-difference step for the active element type.
#[cfg(feature = "f32")]
pub const DEFAULT_STEP: Elem = 3e-3;
/// Default central-difference step for the active element type.
#[cfg(not(feature = "f32"))]
pub const DEFAULT_STEP: Elem = 1e-5;

/// Default relative-error tolerance for the active element type.
#[cfg(feature = "f32")]
pub const DEFAULT_TOL: Elem = 1e-3;
/// Default relative-error tolerance for the active element type.
#[cfg(not(feature = "f32"))]
pub const DEFAULT_TOL: Elem = 1e-4;

/// Relative error `|a − b| / max(1e-6, |a|, |b|)`.
pub fn rel_err(a: Elem, b: Elem) -> Elem {
    (a - b).abs() / (1e-6 as Elem).max(a.abs()).max(b.abs())
}

/// Central finite difference of a scalar function at every coordinate.
pub fn finite_diff<F>(mut f: F, x0: &[Elem], h: Elem) -> Result<Vec<Elem>>
where
    F: FnMut(&[Elem]) -> Result<Elem>,
{
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let step = h * x0[i].abs().max(1.0);
        x[i] = x0[i] + step;
        let fp = f(&x)?;
        x[i] = x0[i] - step;
        let fm = f(&x)?;
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// One finite-difference probe of a loss with respect to a single
/// coordinate of `param`. The closure must rebuild the loss from the
/// parameter's *current* leaf each call; the original values are restored
/// before returning.
pub fn probe_param<F>(loss: F, param: &Parameter, idx: usize, h: Elem) -> Result<Elem>
where
    F: Fn() -> Result<Elem>,
{
    let orig = param.snapshot();
    let step = h * orig[idx].abs().max(1.0);
    let mut bump = orig.clone();
    bump[idx] = orig[idx] + step;
    param.set_data(bump)?;
    let fp = loss()?;
    let mut bump = orig.clone();
    bump[idx] = orig[idx] - step;
    param.set_data(bump)?;
    let fm = loss()?;
    param.set_data(orig)?;
    Ok((fp - fm) / (2.0 * step))
}

/// Result of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: Elem,
    pub numeric: Elem,
    pub rel_err: Elem,
}

impl Probe {
    pub fn new(param: String, index: usize, analytic: Elem, numeric: Elem) -> Probe {
        Probe { param, index, analytic, numeric, rel_err: rel_err(analytic, numeric) }
    }
}
