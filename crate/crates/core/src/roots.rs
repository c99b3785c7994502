//! Scalar root finding.

use crate::error::{Error, Result};

/// Brent's method on a sign-changing bracket `[a, b]`.
pub fn brent(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, xtol: f64, max_iter: usize) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.is_nan() || fb.is_nan() || fa.signum() == fb.signum() {
        return Err(Error::RootNotBracketed { lo: a, hi: b });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if fb.is_nan() {
            return Err(Error::InvalidInput(format!("root function is undefined at {b}")));
        }
    }
    Ok(b)
}

/// Grow `hi` geometrically from `lo` until `f` changes sign; returns the bracket.
pub fn bracket_up(mut f: impl FnMut(f64) -> f64, lo: f64, first: f64, limit: f64) -> Result<(f64, f64)> {
    let flo = f(lo);
    let mut step = first;
    let mut prev = lo;
    while lo + step <= limit {
        let hi = lo + step;
        let fh = f(hi);
        if fh.is_nan() {
            break;
        }
        if fh.signum() != flo.signum() || fh == 0.0 {
            return Ok((prev, hi));
        }
        prev = hi;
        step *= 2.0;
    }
    Err(Error::RootNotBracketed { lo, hi: limit })
}
