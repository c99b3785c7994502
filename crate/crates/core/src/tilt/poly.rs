//! Minimum polynomial divergence `∫ (dν/dμ)^{β+1} dμ` via the θ-dual
//! `G(θ) = ∫ (1 + βΣθ_i(g_i − c_i))^{1/β+1} dμ`.

use nalgebra::{DMatrix, DVector};

use super::feasibility::FeasibilityChecker;
use super::newton::{minimize, Local};
use super::{active_set, EqSolution, SolveReport, SolverOptions, Status, TiltedPosterior};
use crate::constraints::ConstraintSet;
use crate::dist::{ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ψ(θ) = θ / (1 − βθ·c)`.
pub fn theta_to_lambda(theta: &[f64], c: &[f64], beta: f64) -> Vec<f64> {
    let d = 1.0 - beta * dot(theta, c);
    theta.iter().map(|t| t / d).collect()
}

/// `φ(λ) = λ / (1 + βλ·c)`.
pub fn lambda_to_theta(lambda: &[f64], c: &[f64], beta: f64) -> Vec<f64> {
    let d = 1.0 + beta * dot(lambda, c);
    lambda.iter().map(|l| l / d).collect()
}

pub fn solve_polynomial(
    prior: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    eng: &ExpectationEngine,
) -> Result<(TiltedPosterior, SolveReport)> {
    solve_polynomial_with(prior, cs, beta, eng, &SolverOptions::default())
}

/// Posterior `∝ (1 + βΣλg)^{1/β}` matching the views. Newton steps on the
/// θ-dual are halved until `1 + βθ·(g − c) ≥ 0` holds on the support.
pub fn solve_polynomial_with(
    prior: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    eng: &ExpectationEngine,
    opts: &SolverOptions,
) -> Result<(TiltedPosterior, SolveReport)> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let base = prior.materialize(eng)?;
    if cs.is_empty() {
        let report = SolveReport { residuals: vec![], dual_value: 1.0, iterations: 0, status: Status::Converged };
        return Ok((TiltedPosterior::identity(base), report));
    }
    let tol = opts.tolerance(prior, eng);
    active_set(cs, tol, eng, opts.initial.as_deref(), |sub, warm| {
        solve_equalities(&base, sub, beta, eng, tol, opts.max_iter, warm)
    })
}

fn solve_equalities(
    base: &Prior,
    cs: &ConstraintSet,
    beta: f64,
    eng: &ExpectationEngine,
    tol: f64,
    max_iter: usize,
    warm: Option<Vec<f64>>,
) -> Result<EqSolution> {
    let k = cs.k();
    if k == 0 {
        return Ok(EqSolution { post: TiltedPosterior::identity(base.clone()), dual: 1.0, iterations: 0, status: Status::Converged });
    }
    let g = cs.g();
    let c = cs.c();
    let breaks = cs.breakpoints();
    let scale: Vec<f64> = c.iter().map(|v| v.abs().max(1.0)).collect();
    let checker = FeasibilityChecker::new(base, g);
    let m = 2 + k + k * (k + 1) / 2;
    let inv = 1.0 / beta;

    let eval = |th: &DVector<f64>| -> Result<Option<Local>> {
        let t = th.as_slice();
        let a0 = 1.0 - beta * dot(t, c);
        let a: Vec<f64> = t.iter().map(|v| beta * v).collect();
        if !checker.affine_nonneg(a0, &a) {
            return Ok(None);
        }
        let est = base.expect_vec(eng, m, &breaks, &|x, o| {
            for i in 0..k {
                o[2 + i] = g[i].eval(x);
            }
            let u = (a0 + (0..k).map(|i| a[i] * o[2 + i]).sum::<f64>()).max(0.0);
            let p = if u == 0.0 { 0.0 } else { u.powf(inv) };
            let q = if u == 0.0 { 0.0 } else { p / u };
            o[0] = u * p;
            o[1] = p;
            let mut r = 2 + k;
            for i in 0..k {
                for j in i..k {
                    o[r] = q * (o[2 + i] - c[i]) * (o[2 + j] - c[j]);
                    r += 1;
                }
            }
            for i in 0..k {
                o[2 + i] *= p;
            }
        });
        let v = match est {
            Ok(e) => e.values,
            Err(Error::DivergentIntegral(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let z = v[1];
        if !(z > 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        let grad = DVector::from_iterator(k, (0..k).map(|i| (1.0 + beta) * (v[2 + i] - c[i] * z)));
        let mut hess = DMatrix::zeros(k, k);
        let mut r = 2 + k;
        for i in 0..k {
            for j in i..k {
                hess[(i, j)] = (1.0 + beta) * v[r];
                hess[(j, i)] = (1.0 + beta) * v[r];
                r += 1;
            }
        }
        let resid = (0..k).map(|i| (v[2 + i] / z - c[i]).abs() / scale[i]).fold(0.0, f64::max);
        Ok(Some(Local { value: v[0], grad, hess, resid }))
    };

    let theta0 = match warm {
        Some(l) if 1.0 + beta * dot(&l, c) > 0.0 => lambda_to_theta(&l, c, beta),
        _ => vec![0.0; k],
    };
    let theta0 = if eval(&DVector::from_vec(theta0.clone()))?.is_some() { theta0 } else { vec![0.0; k] };
    let out = minimize(DVector::from_vec(theta0), tol, max_iter, eval)?;
    if !out.converged {
        return Err(Error::Infeasible(format!(
            "views lie outside the attainable set for beta = {beta} (scaled residual {:.3e}); consider the penalised problem",
            out.local.resid
        )));
    }
    let theta = out.x.as_slice().to_vec();
    let a0 = 1.0 - beta * dot(&theta, c);
    // E[u^{1/β}] under the final θ
    let z = mass(base, g, a0, &theta, beta, eng, &breaks)?;
    let lambda = theta_to_lambda(&theta, c, beta);
    let (post, status) = if a0 > 0.0 {
        let zl = z / a0.powf(inv);
        (TiltedPosterior::poly_parts(base.clone(), g.to_vec(), lambda.clone(), beta, 1.0, lambda, zl), Status::Converged)
    } else {
        (TiltedPosterior::poly_parts(base.clone(), g.to_vec(), lambda, beta, a0, theta, z), Status::NotStronglyFeasible)
    };
    Ok(EqSolution { post, dual: out.local.value, iterations: out.iterations, status })
}

fn mass(
    base: &Prior,
    g: &[Payoff],
    a0: f64,
    theta: &[f64],
    beta: f64,
    eng: &ExpectationEngine,
    breaks: &[(usize, f64)],
) -> Result<f64> {
    Ok(base
        .expect_vec(eng, 1, breaks, &|x, o| {
            let u = a0 + beta * g.iter().zip(theta).map(|(p, t)| t * p.eval(x)).sum::<f64>();
            o[0] = if u > 0.0 { u.powf(1.0 / beta) } else { 0.0 };
        })?
        .value())
}

/// `β = 1/m` for the largest `m ≤ 10` such that every view has a finite
/// `(m+1)`-th absolute moment; `None` when even third moments diverge.
pub fn suggest_beta(prior: &Prior, g: &[Payoff], eng: &ExpectationEngine) -> Result<Option<f64>> {
    let breaks: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
    let mut best = None;
    for m in 1..=10u32 {
        let e = prior.expect_vec(eng, g.len(), &breaks, &|x, o| {
            for (v, p) in o.iter_mut().zip(g) {
                *v = p.eval(x).abs().powi(m as i32 + 1);
            }
        });
        match e {
            Ok(v) if v.values.iter().all(|x| x.is_finite()) => best = Some(1.0 / m as f64),
            Ok(_) | Err(Error::DivergentIntegral(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}
