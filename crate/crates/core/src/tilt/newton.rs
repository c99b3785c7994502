//! Damped Newton iterations with a Broyden (secant) fallback.
//!
//! Evaluators return `Ok(None)` for points outside the admissible domain
//! (infeasible multipliers or divergent integrals); steps are halved until
//! they land inside.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Objective value with gradient and Hessian.
pub(crate) struct Local {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Stationarity measure compared against the tolerance.
    pub resid: f64,
}

#[cfg(test)]
impl Local {
    pub fn new(value: f64, grad: DVector<f64>, hess: DMatrix<f64>) -> Self {
        let resid = grad.amax();
        Self { value, grad, hess, resid }
    }
}

pub(crate) struct MinOutcome {
    pub x: DVector<f64>,
    pub local: Local,
    pub iterations: usize,
    pub converged: bool,
    /// Number of trial points rejected as outside the domain.
    pub boundary_hits: usize,
}

/// `-H⁺ g` through a symmetric eigendecomposition; tiny eigenvalues are
/// dropped so redundant constraints give a minimum-norm step.
pub(crate) fn pinv_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = top * 1e-13;
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let ev = eig.eigenvalues[i];
        if ev.abs() > cut && ev.abs() > 0.0 {
            let v = eig.eigenvectors.column(i);
            d -= v * (v.dot(g) / ev);
        }
    }
    d
}

/// Minimise a convex function by damped Newton steps.
pub(crate) fn minimize<F>(x0: DVector<f64>, tol: f64, max_iter: usize, mut f: F) -> Result<MinOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<Option<Local>>,
{
    let mut x = x0;
    let mut cur = f(&x)?.ok_or_else(|| Error::Infeasible("starting point lies outside the domain".into()))?;
    let mut hits = 0;
    let mut it = 0;
    while it < max_iter {
        if cur.resid <= tol {
            // one free Newton step squares the residual
            let d = pinv_solve(&cur.hess, &cur.grad);
            if d.iter().all(|v| v.is_finite()) {
                let xt = &x + &d;
                if let Some(l) = f(&xt)? {
                    if l.resid < cur.resid && l.value <= cur.value + 1e-13 * (1.0 + cur.value.abs()) {
                        x = xt;
                        cur = l;
                    }
                }
            }
            return Ok(MinOutcome { x, local: cur, iterations: it, converged: true, boundary_hits: hits });
        }
        it += 1;
        let mut d = pinv_solve(&cur.hess, &cur.grad);
        let mut slope = d.dot(&cur.grad);
        if !(slope < 0.0) || d.iter().any(|v| !v.is_finite()) {
            d = -cur.grad.clone();
            slope = d.dot(&cur.grad);
        }
        let mut accepted = None;
        let mut s = 1.0;
        for _ in 0..80 {
            let xt = &x + &d * s;
            match f(&xt)? {
                None => hits += 1,
                Some(l) => {
                    let armijo = l.value <= cur.value + 1e-4 * s * slope;
                    let flat = l.value <= cur.value + 1e-13 * (1.0 + cur.value.abs());
                    if armijo || (flat && l.resid < cur.resid) {
                        accepted = Some((xt, l, s));
                        break;
                    }
                }
            }
            s *= 0.5;
        }
        match accepted {
            Some((xt, l, s)) => {
                // creeping along a domain boundary
                let stalled = s < 1e-10 || ((&xt - &x).amax() <= 1e-15 * (1.0 + x.amax()) && l.resid >= cur.resid);
                x = xt;
                cur = l;
                if stalled {
                    break;
                }
            }
            None => {
                // secant fallback on the stationarity system
                let out = broyden(&x, &cur.grad, &cur.hess, tol, 50, |p| Ok(f(p)?.map(|l| l.grad)))?;
                match out {
                    Some((xb, _)) => {
                        if let Some(l) = f(&xb)? {
                            if l.resid < cur.resid {
                                x = xb;
                                cur = l;
                                continue;
                            }
                        }
                        break;
                    }
                    None => break,
                }
            }
        }
    }
    let converged = cur.resid <= tol;
    Ok(MinOutcome { x, local: cur, iterations: it, converged, boundary_hits: hits })
}

/// Good-Broyden iterations on `F(x) = 0` from `x0`, seeded with the Jacobian
/// estimate `j0`. Returns the best point found with its residual norm.
pub(crate) fn broyden<F>(
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    j0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
    mut f: F,
) -> Result<Option<(DVector<f64>, f64)>>
where
    F: FnMut(&DVector<f64>) -> Result<Option<DVector<f64>>>,
{
    let n = x0.len();
    let mut b = j0.clone() + DMatrix::identity(n, n) * (1e-12 * j0.amax().max(1e-300));
    let mut x = x0.clone();
    let mut fx = f0.clone();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _ in 0..max_iter {
        let norm = fx.amax();
        if best.as_ref().map_or(true, |bst| norm < bst.1) {
            best = Some((x.clone(), norm));
        }
        if norm <= tol {
            break;
        }
        let Some(dx) = b.clone().lu().solve(&(-&fx)) else {
            break;
        };
        let mut s = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let xt = &x + &dx * s;
            if let Some(ft) = f(&xt)? {
                if ft.amax() < norm || s < 1e-6 {
                    next = Some((xt, ft));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            break;
        };
        let step = &xn - &x;
        let ss = step.dot(&step);
        if ss == 0.0 {
            break;
        }
        let y = &fnew - &fx;
        let corr = (&y - &b * &step) / ss;
        b += corr * step.transpose();
        x = xn;
        fx = fnew;
    }
    let norm = fx.amax();
    if best.as_ref().map_or(true, |bst| norm < bst.1) {
        best = Some((x, norm));
    }
    Ok(best)
}

pub(crate) struct SysOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Newton's method on `F(x) = 0` with merit `‖F‖∞`; falls back to Broyden
/// when no damped Newton step reduces the residual.
pub(crate) fn solve_system<F>(x0: DVector<f64>, tol: f64, max_iter: usize, mut f: F) -> Result<SysOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<Option<(DVector<f64>, DMatrix<f64>)>>,
{
    let mut x = x0;
    let (mut fx, mut jx) = f(&x)?.ok_or_else(|| Error::Infeasible("starting point lies outside the domain".into()))?;
    let mut it = 0;
    while it < max_iter && fx.amax() > tol {
        it += 1;
        let dx = match jx.clone().lu().solve(&(-&fx)) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => {
                let jtj = jx.transpose() * &jx;
                let jtf = jx.transpose() * &fx;
                pinv_solve(&jtj, &jtf)
            }
        };
        let mut s = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let xt = &x + &dx * s;
            if let Some((ft, jt)) = f(&xt)? {
                if ft.amax() < (1.0 - 1e-4 * s) * fx.amax() {
                    next = Some((xt, ft, jt));
                    break;
                }
            }
            s *= 0.5;
        }
        match next {
            Some((xn, fnew, jnew)) => {
                x = xn;
                fx = fnew;
                jx = jnew;
            }
            None => {
                let out = broyden(&x, &fx, &jx, tol, 50, |p| Ok(f(p)?.map(|v| v.0)))?;
                let Some((xb, nb)) = out else { break };
                if nb < fx.amax() {
                    if let Some((fb, jb)) = f(&xb)? {
                        x = xb;
                        fx = fb;
                        jx = jb;
                        continue;
                    }
                }
                break;
            }
        }
    }
    let converged = fx.amax() <= tol;
    Ok(SysOutcome { x, iterations: it, converged })
}
