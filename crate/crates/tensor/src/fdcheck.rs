//! Central finite-difference utilities for checking analytic gradients.
//!
//! These run the loss closure twice per probed coordinate and never touch the
//! tape's backward machinery, so they stay an independent oracle for it.

use ndarray::ArrayD;

use crate::element::{elem, Element};

/// Central difference df/dx[idx] of `f` at `x`.
pub fn central_diff<T, F>(f: &mut F, x: &ArrayD<T>, idx: usize, h: T) -> T
where
    T: Element,
    F: FnMut(&ArrayD<T>) -> T,
{
    let mut xp = x.clone();
    let mut xm = x.clone();
    {
        let xs = xp.as_slice_mut().expect("standard layout");
        xs[idx] += h;
    }
    {
        let xs = xm.as_slice_mut().expect("standard layout");
        xs[idx] -= h;
    }
    (f(&xp) - f(&xm)) / (h + h)
}

/// Relative error between an analytic and a reference value, guarded for
/// near-zero references.
pub fn rel_err<T: Element>(analytic: T, reference: T) -> T {
    let denom = analytic.abs().max(reference.abs());
    if denom < elem::<T>(1e-12) {
        T::zero()
    } else {
        (analytic - reference).abs() / denom
    }
}

/// Checks `grad` against central differences of `f` at every coordinate of
/// `x`. Returns the worst relative error.
pub fn max_grad_rel_err<T, F>(f: &mut F, x: &ArrayD<T>, grad: &ArrayD<T>, h: T) -> T
where
    T: Element,
    F: FnMut(&ArrayD<T>) -> T,
{
    assert_eq!(x.shape(), grad.shape());
    let gs = grad.as_slice().expect("standard layout");
    let mut worst = T::zero();
    for idx in 0..x.len() {
        let fd = central_diff(f, x, idx, h);
        let e = rel_err(gs[idx], fd);
        if e > worst {
            worst = e;
        }
    }
    worst
}
