//! Bracketing bisection with a short Newton polish.
//!
//! Every equation this crate has to invert (transcendental horizon
//! constants, duration solvers, boundary hits, impulse sizes) is continuous
//! and monotone on its bracket, so bisection is guaranteed to converge. It
//! runs down to an interval width of about 1e−14 relative, after which a few
//! Newton steps sharpen the last digits when a derivative is available.

use crate::{Error, Result};

/// Interval-width target, relative to 1 + |x|.
const WIDTH_TOL: f64 = 1e-14;
/// Hard cap on bisection steps; 64 already exhausts an f64 mantissa on any
/// reasonable bracket, 200 leaves margin for extreme scales.
const MAX_STEPS: usize = 200;

/// Finds the root of a continuous `f` with a sign change over `[lo, hi]`.
///
/// Returns an error if the bracket is invalid or carries no sign change.
pub fn bisect(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Numerical(format!(
            "invalid bracket [{lo}, {hi}]"
        )));
    }
    let mut a = lo;
    let mut b = hi;
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Numerical(format!(
            "no sign change on [{lo}, {hi}]: f(lo) = {fa:e}, f(hi) = {fb:e}"
        )));
    }
    for _ in 0..MAX_STEPS {
        let mid = 0.5 * (a + b);
        if b - a <= WIDTH_TOL * (1.0 + mid.abs()) {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Up to three Newton steps from `x0`, clamped to `[lo, hi]`.
///
/// A step is kept only if it shrinks |f|, so the polish can never walk away
/// from a root the bisection already pinned down.
pub fn newton_polish(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    x0: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let mut x = x0;
    let mut fx = f(x);
    for _ in 0..3 {
        let d = df(x);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        let cand = (x - fx / d).clamp(lo, hi);
        let fc = f(cand);
        if fc.abs() < fx.abs() {
            x = cand;
            fx = fc;
        } else {
            break;
        }
    }
    x
}

/// Bisection followed by a Newton polish with the supplied derivative.
pub fn bisect_newton(
    f: impl Fn(f64) -> f64 + Copy,
    df: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let x = bisect(f, lo, hi)?;
    Ok(newton_polish(f, df, x, lo, hi))
}

/// First point where the predicate flips from false to true on `[lo, hi]`.
///
/// Assumes a single flip (monotone predicate). Used for hit times where the
/// crossing can be a tangency rather than a clean sign change, e.g. a
/// trajectory touching the flat part of a boundary.
pub fn bisect_predicate(p: impl Fn(f64) -> bool, lo: f64, hi: f64) -> f64 {
    let mut a = lo;
    let mut b = hi;
    for _ in 0..MAX_STEPS {
        if b - a <= WIDTH_TOL * (1.0 + a.abs()) {
            break;
        }
        let mid = 0.5 * (a + b);
        if p(mid) {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}
