//! Penalised polynomial-divergence updates for views outside the attainable
//! set: minimise `∫(dν/dμ)^{β+1} dμ + (1/t) Σ y_i²/w_i` over densities,
//! where `y_i = E_ν[g_i] − c_i`.
//!
//! Densities range over the family `(1 + βλ·g)^{1/β}` with `1 + βλ·g ≥ 0`.
//! Over all densities the problem is convex, with dual in `(m, η)`
//! `E[f*(m·g + η)] − m·c − η + (t/4) Σ w_i m_i²`, where
//! `f*(s) = β/(β+1) s L(s)` and `L(s) = (s_+/(β+1))^{1/β}`; the minimiser is
//! `dν/dμ = L(m·g + η)` with `y = −(t/2) w ⊙ m`. When that density has no
//! truncation it lies in the family and is returned. Otherwise the family is
//! searched directly in `θ = λ/(1 + βλ·c)`, densities
//! `∝ (1 + βθ·(g − c))^{1/β}`, a convex domain that includes `λ → ∞`.

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::dist::{ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::tilt::newton::{minimize, Local};
use crate::tilt::{theta_to_lambda, FeasibilityChecker, TiltedPosterior};

/// Multipliers beyond this norm are reported clipped.
pub const LAMBDA_CAP: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct PerturbedSolution {
    /// Multipliers of `(1 + βΣλg)^{1/β}`; clipped to norm [`LAMBDA_CAP`] along
    /// the tilt direction when the offset is not positive.
    pub lambda: Vec<f64>,
    /// `θ` with density `∝ (1 + βθ·(g − c))^{1/β}`.
    pub theta: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub achieved: Vec<f64>,
    /// `Σ y_i²/w_i`
    pub distance: f64,
    /// `∫ (dν/dμ)^{β+1} dμ`
    pub divergence: f64,
    pub objective: f64,
    /// `‖λ‖` exceeded [`LAMBDA_CAP`] or the optimum has no `1 + βλ·g` form.
    pub lambda_capped: bool,
    /// The minimiser was pressed against the nonnegativity boundary.
    pub on_boundary: bool,
    pub iterations: usize,
    pub posterior: TiltedPosterior,
}

#[derive(Debug, Clone)]
pub struct DistanceCurve {
    pub points: Vec<(f64, f64)>,
    /// Distance at the smallest `t`, the estimate of `d(c, c₀)`.
    pub estimate: f64,
    /// Last two distances differ by less than 5%.
    pub converged: bool,
    pub solutions: Vec<PerturbedSolution>,
}

/// Unrestricted dual over `(m, η)`.
struct Dual<'a> {
    base: &'a Prior,
    cs: &'a ConstraintSet,
    beta: f64,
    t: f64,
    eng: &'a ExpectationEngine,
    breaks: Vec<(usize, f64)>,
    scale: Vec<f64>,
}

impl Dual<'_> {
    /// Packs `E f*(s)`, `E[(g,1) L]` and `E[(g,1)(g,1)ᵀ L']` with `s = m·g + η`.
    fn local(&self, x: &DVector<f64>) -> Result<Option<Local>> {
        let k = self.cs.k();
        let g = self.cs.g();
        let c = self.cs.c();
        let w = self.cs.weights();
        let beta = self.beta;
        let inv = 1.0 / beta;
        let b1 = beta + 1.0;
        let eta = x[k];
        let mu: Vec<f64> = x.as_slice()[..k].to_vec();
        let n = k + 1;
        let m = 1 + n + n * (n + 1) / 2;
        let est = self.base.expect_vec(self.eng, m, &self.breaks, &|pt, o| {
            let mut h = [0.0; 64];
            let mut s = eta;
            for i in 0..k {
                h[i] = g[i].eval(pt);
                s += mu[i] * h[i];
            }
            h[k] = 1.0;
            if s <= 0.0 {
                o.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let l = (s / b1).powf(inv);
            let dl = l / (beta * s);
            o[0] = beta / b1 * s * l;
            for i in 0..n {
                o[1 + i] = h[i] * l;
            }
            let mut r = 1 + n;
            for i in 0..n {
                for j in i..n {
                    o[r] = h[i] * h[j] * dl;
                    r += 1;
                }
            }
        });
        let v = match est {
            Ok(e) => e.values,
            Err(Error::DivergentIntegral(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if v.iter().any(|a| !a.is_finite()) {
            return Ok(None);
        }
        let pen: f64 = (0..k).map(|i| w[i] * mu[i] * mu[i]).sum::<f64>() * self.t / 4.0;
        let value = v[0] - (0..k).map(|i| mu[i] * c[i]).sum::<f64>() - eta + pen;
        let mut grad = DVector::zeros(n);
        for i in 0..k {
            grad[i] = v[1 + i] - c[i] + 0.5 * self.t * w[i] * mu[i];
        }
        grad[k] = v[1 + k] - 1.0;
        let mut hess = DMatrix::zeros(n, n);
        let mut r = 1 + n;
        for i in 0..n {
            for j in i..n {
                hess[(i, j)] = v[r];
                hess[(j, i)] = v[r];
                r += 1;
            }
        }
        for i in 0..k {
            hess[(i, i)] += 0.5 * self.t * w[i];
        }
        let resid = (0..n).map(|i| grad[i].abs() / self.scale[i]).fold(0.0, f64::max);
        Ok(Some(Local { value, grad, hess, resid }))
    }
}

struct Moments {
    /// `E[u^{1/β+1}]`
    g0: f64,
    /// `E[u^{1/β}]`
    z: f64,
    /// `E[h_i u^{1/β}]`
    hu: Vec<f64>,
    /// `E[h_j u^{1/β−1}]`
    a: Vec<f64>,
    /// `E[h_i h_j u^{1/β−1}]`
    hh: DMatrix<f64>,
}

/// The objective restricted to the family, in `θ`, with `h = g − c`.
struct Family<'a> {
    base: &'a Prior,
    cs: &'a ConstraintSet,
    beta: f64,
    t: f64,
    eng: &'a ExpectationEngine,
    checker: FeasibilityChecker,
    breaks: Vec<(usize, f64)>,
}

impl Family<'_> {
    fn moments(&self, th: &[f64]) -> Result<Option<Moments>> {
        let k = self.cs.k();
        let c = self.cs.c();
        let beta = self.beta;
        let a0 = 1.0 - beta * th.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        let av: Vec<f64> = th.iter().map(|v| beta * v).collect();
        if !(a0 > 0.0) || !self.checker.affine_nonneg(a0, &av) {
            return Ok(None);
        }
        let g = self.cs.g();
        let inv = 1.0 / beta;
        let m = 2 + 2 * k + k * (k + 1) / 2;
        let est = self.base.expect_vec(self.eng, m, &self.breaks, &|x, o| {
            let mut u = a0;
            for i in 0..k {
                let v = g[i].eval(x);
                o[2 + i] = v - c[i];
                u += av[i] * v;
            }
            let u = u.max(0.0);
            let p = if u == 0.0 { 0.0 } else { u.powf(inv) };
            let q = if u == 0.0 { 0.0 } else { p / u };
            o[0] = u * p;
            o[1] = p;
            let mut r = 2 + 2 * k;
            for i in 0..k {
                for j in i..k {
                    o[r] = q * o[2 + i] * o[2 + j];
                    r += 1;
                }
            }
            for i in 0..k {
                let h = o[2 + i];
                o[2 + i] = h * p;
                o[2 + k + i] = h * q;
            }
        });
        let v = match est {
            Ok(e) => e.values,
            Err(Error::DivergentIntegral(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !(v[1] > 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        let mut hh = DMatrix::zeros(k, k);
        let mut r = 2 + 2 * k;
        for i in 0..k {
            for j in i..k {
                hh[(i, j)] = v[r];
                hh[(j, i)] = v[r];
                r += 1;
            }
        }
        Ok(Some(Moments { g0: v[0], z: v[1], hu: v[2..2 + k].to_vec(), a: v[2 + k..2 + 2 * k].to_vec(), hh }))
    }

    /// Objective and analytic gradient.
    fn value_grad(&self, th: &[f64]) -> Result<Option<(f64, DVector<f64>)>> {
        let Some(mo) = self.moments(th)? else {
            return Ok(None);
        };
        let k = th.len();
        let w = self.cs.weights();
        let beta = self.beta;
        let z = mo.z;
        let r: Vec<f64> = mo.hu.iter().map(|v| v / z).collect();
        let i_val = mo.g0 / z.powf(beta + 1.0);
        let pen: f64 = (0..k).map(|i| r[i] * r[i] / w[i]).sum::<f64>() / self.t;
        let mut grad = DVector::zeros(k);
        for j in 0..k {
            let mut gj = (1.0 + beta) * (r[j] / z.powf(beta) - i_val * mo.a[j] / z);
            for i in 0..k {
                let dr = (mo.hh[(i, j)] - r[i] * mo.a[j]) / z;
                gj += 2.0 / self.t * r[i] / w[i] * dr;
            }
            grad[j] = gj;
        }
        Ok(Some((i_val + pen, grad)))
    }

    /// Value, gradient and a positive definite finite-difference Hessian.
    fn local(&self, th: &DVector<f64>) -> Result<Option<Local>> {
        let Some((value, grad)) = self.value_grad(th.as_slice())? else {
            return Ok(None);
        };
        let k = th.len();
        let mut hess = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-6 * (1.0 + th[j].abs());
            let mut cols = Vec::with_capacity(2);
            for s in [h, -h] {
                let mut p = th.clone();
                p[j] += s;
                cols.push(self.value_grad(p.as_slice())?.map(|v| v.1));
            }
            let col = match (&cols[0], &cols[1]) {
                (Some(a), Some(b)) => (a - b) / (2.0 * h),
                (Some(a), None) => (a - &grad) / h,
                (None, Some(b)) => (&grad - b) / h,
                (None, None) => return Ok(None),
            };
            hess.set_column(j, &col);
        }
        let sym = 0.5 * (&hess + hess.transpose());
        let eig = sym.symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            *v = v.abs().max(1e-12 * top);
        }
        let hess = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        // Newton decrement relative to the objective
        let step = hess.clone().lu().solve(&grad).unwrap_or_else(|| grad.clone());
        let resid = grad.dot(&step).abs() / (1.0 + value.abs());
        Ok(Some(Local { value, grad, hess, resid }))
    }
}

fn check_inputs(cs: &ConstraintSet, beta: f64, t: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("penalty scale t must be positive, got {t}")));
    }
    if cs.k1() > 0 {
        return Err(Error::InvalidInput("the penalised problem takes equality views only".into()));
    }
    if cs.k() > 63 {
        return Err(Error::InvalidInput("at most 63 views are supported".into()));
    }
    Ok(())
}

pub fn solve_perturbed(prior: &Prior, cs: &ConstraintSet, beta: f64, t: f64, eng: &ExpectationEngine) -> Result<PerturbedSolution> {
    solve_perturbed_from(prior, cs, beta, t, eng, None)
}

/// As [`solve_perturbed`]; `theta0` seeds the search within the family.
pub fn solve_perturbed_from(
    prior: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    t: f64,
    eng: &ExpectationEngine,
    theta0: Option<&[f64]>,
) -> Result<PerturbedSolution> {
    check_inputs(cs, beta, t)?;
    let base = prior.materialize(eng)?;
    let k = cs.k();
    let checker = FeasibilityChecker::new(&base, cs.g());
    if !checker.affine_nonneg(1.0, &vec![0.0; k]) {
        return Err(Error::Infeasible("the multiplier domain is empty".into()));
    }
    let c = cs.c();
    let mut scale: Vec<f64> = c.iter().map(|v| v.abs().max(1.0)).collect();
    scale.push(1.0);
    let dual = Dual { base: &base, cs, beta, t, eng, breaks: cs.breakpoints(), scale };
    let mut x0 = vec![0.0; k + 1];
    x0[k] = beta + 1.0;
    let out = minimize(DVector::from_vec(x0), 1e-13, 300, |x| dual.local(x))?;
    if out.converged {
        let b1 = beta + 1.0;
        let offset = out.x[k] / b1;
        let coeffs: Vec<f64> = (0..k).map(|i| out.x[i] / (beta * b1)).collect();
        let slope: Vec<f64> = coeffs.iter().map(|v| beta * v).collect();
        let d = offset + slope.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        if offset > 0.0 && d > 0.0 && checker.affine_nonneg(offset, &slope) {
            let theta: Vec<f64> = coeffs.iter().map(|v| v / d).collect();
            let w = cs.weights();
            let y: Vec<f64> = (0..k).map(|i| -0.5 * t * w[i] * out.x[i]).collect();
            return finish(&base, cs, beta, t, eng, theta, Some(y), out.iterations, false);
        }
    }
    let fam = Family { base: &base, cs, beta, t, eng, checker, breaks: cs.breakpoints() };
    let mut x0 = theta0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; k]);
    if x0.len() != k || fam.moments(&x0)?.is_none() {
        x0 = vec![0.0; k];
    }
    let out = minimize(DVector::from_vec(x0), 1e-15, 300, |th| fam.local(th))?;
    let on_boundary = !out.converged && out.boundary_hits > 0;
    finish(&base, cs, beta, t, eng, out.x.as_slice().to_vec(), None, out.iterations, on_boundary)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    base: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    t: f64,
    eng: &ExpectationEngine,
    theta: Vec<f64>,
    y: Option<Vec<f64>>,
    iterations: usize,
    on_boundary: bool,
) -> Result<PerturbedSolution> {
    let c = cs.c();
    let w = cs.weights();
    let a0 = 1.0 - beta * theta.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    let mut lambda = theta_to_lambda(&theta, c, beta);
    let norm = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lambda_capped = !(a0 > 0.0) || !(norm <= LAMBDA_CAP);
    if lambda_capped {
        let dir = theta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        lambda = theta.iter().map(|v| v / dir * LAMBDA_CAP).collect();
    }
    let raw = TiltedPosterior::poly_parts(base.clone(), cs.g().to_vec(), lambda.clone(), beta, a0, theta.clone(), 1.0);
    let mass = raw.expect_vec(eng, 1, &[], &|_, o| o[0] = 1.0)?.value();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Infeasible("penalised minimiser left the multiplier domain".into()));
    }
    let posterior = TiltedPosterior::poly_parts(base.clone(), cs.g().to_vec(), lambda.clone(), beta, a0, theta.clone(), mass);
    let achieved = posterior.moments(eng)?;
    let y = y.unwrap_or_else(|| achieved.iter().zip(c).map(|(a, b)| a - b).collect());
    let distance = y.iter().zip(w).map(|(y, w)| y * y / w).sum::<f64>();
    let divergence = posterior.expect_vec(eng, 1, &[], &|x, o| o[0] = posterior.ratio(x).powf(beta))?.value();
    Ok(PerturbedSolution {
        lambda,
        theta,
        y,
        t,
        achieved,
        distance,
        divergence,
        objective: divergence + distance / t,
        lambda_capped,
        on_boundary,
        iterations,
        posterior,
    })
}

/// Solutions along a decreasing penalty grid, each warm-started from the last.
pub fn distance_curve(
    prior: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    t_grid: &[f64],
    eng: &ExpectationEngine,
) -> Result<DistanceCurve> {
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if t_grid.iter().any(|t| !(*t > 0.0)) || t_grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidInput("penalty grid must be positive and decreasing".into()));
    }
    let base = prior.materialize(eng)?;
    let mut sols: Vec<PerturbedSolution> = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let warm = sols.last().map(|s| s.theta.clone());
        sols.push(solve_perturbed_from(&base, cs, beta, t, eng, warm.as_deref())?);
    }
    let points: Vec<(f64, f64)> = sols.iter().map(|s| (s.t, s.distance)).collect();
    let estimate = points.last().unwrap().1;
    let converged = match points.len() {
        0 | 1 => false,
        n => {
            let (a, b) = (points[n - 2].1, points[n - 1].1);
            (a - b).abs() < 0.05 * a.abs().max(b.abs()) || (a == 0.0 && b == 0.0)
        }
    };
    Ok(DistanceCurve { points, estimate, converged, solutions: sols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Density;
    use crate::payoff::Payoff;
    use crate::tilt::{feasibility_bound, solve_polynomial};

    fn lognormal() -> Prior {
        Prior::Density(Density::lognormal(0.0, 0.04).unwrap())
    }

    #[test]
    fn attainable_views_need_no_perturbation() {
        let eng = ExpectationEngine::default();
        let mean = 0.02f64.exp();
        let cs = ConstraintSet::equalities(vec![Payoff::identity()], vec![1.02 * mean]).unwrap();
        let exact = solve_polynomial(&lognormal(), &cs, 1.0, &eng).unwrap().0;
        let sol = solve_perturbed(&lognormal(), &cs, 1.0, 1e-6, &eng).unwrap();
        assert!(sol.y[0].abs() < 1e-3);
        assert!((sol.lambda[0] - exact.lambda()[0]).abs() < 1e-3);
        let sol = solve_perturbed(&lognormal(), &cs, 1.0, 1e-8, &eng).unwrap();
        assert!((sol.lambda[0] - exact.lambda()[0]).abs() < 1e-4);
        assert!(!sol.lambda_capped);
    }

    #[test]
    fn unattainable_view_approaches_the_bound() {
        let eng = ExpectationEngine::default();
        let mean = 0.02f64.exp();
        let bound = feasibility_bound(&lognormal(), &Payoff::identity(), 1, &eng).unwrap();
        let a = bound + 0.01;
        let cs = ConstraintSet::equalities(vec![Payoff::identity()], vec![a * mean]).unwrap();
        let curve = distance_curve(&lognormal(), &cs, 1.0, &[1e-2, 1e-4, 1e-6, 1e-8], &eng).unwrap();
        let ratios: Vec<f64> = curve.solutions.iter().map(|s| s.achieved[0] / mean).collect();
        for w in ratios.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!(ratios.iter().all(|r| *r <= bound + 1e-9));
        assert!((ratios.last().unwrap() - bound).abs() < 1e-5);
        let want = (0.01 * mean).powi(2);
        assert!(curve.converged);
        assert!((curve.estimate - want).abs() < 0.1 * want);
        // penalty trade-off: divergence grows as t shrinks, distance falls
        for w in curve.solutions.windows(2) {
            assert!(w[1].divergence >= w[0].divergence - 1e-9);
            assert!(w[1].distance <= w[0].distance + 1e-12);
        }
    }

    #[test]
    fn grid_validation() {
        let eng = ExpectationEngine::default();
        let cs = ConstraintSet::equalities(vec![Payoff::identity()], vec![1.0]).unwrap();
        assert!(distance_curve(&lognormal(), &cs, 1.0, &[1e-2, 1e-1], &eng).is_err());
        assert!(solve_perturbed(&lognormal(), &cs, 1.0, 0.0, &eng).is_err());
        let one = distance_curve(&lognormal(), &cs, 1.0, &[1e-3], &eng).unwrap();
        assert_eq!(one.points.len(), 1);
    }
}
