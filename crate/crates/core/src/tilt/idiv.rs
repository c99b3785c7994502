//! Minimum I-divergence: exponential tilts through the log-partition dual.

use nalgebra::{DMatrix, DVector};

use super::newton::{minimize, Local};
use super::{active_set, EqSolution, SolveReport, SolverOptions, Status, TiltedPosterior};
use crate::constraints::ConstraintSet;
use crate::dist::{ExpectationEngine, Prior};
use crate::error::{Error, Result};

pub fn solve_i_divergence(prior: &Prior, cs: &ConstraintSet, eng: &ExpectationEngine) -> Result<(TiltedPosterior, SolveReport)> {
    solve_i_divergence_with(prior, cs, eng, &SolverOptions::default())
}

/// Minimise `log ∫ e^{Σλg} dμ − Σλc` by damped Newton, with an active set
/// for inequality views.
pub fn solve_i_divergence_with(
    prior: &Prior,
    cs: &ConstraintSet,
    eng: &ExpectationEngine,
    opts: &SolverOptions,
) -> Result<(TiltedPosterior, SolveReport)> {
    let base = prior.materialize(eng)?;
    if cs.is_empty() {
        let report = SolveReport { residuals: vec![], dual_value: 0.0, iterations: 0, status: Status::Converged };
        return Ok((TiltedPosterior::identity(base), report));
    }
    let tol = opts.tolerance(prior, eng);
    active_set(cs, tol, eng, opts.initial.as_deref(), |sub, warm| solve_equalities(&base, sub, eng, tol, opts.max_iter, warm))
}

fn solve_equalities(
    base: &Prior,
    cs: &ConstraintSet,
    eng: &ExpectationEngine,
    tol: f64,
    max_iter: usize,
    warm: Option<Vec<f64>>,
) -> Result<EqSolution> {
    let k = cs.k();
    if k == 0 {
        return Ok(EqSolution { post: TiltedPosterior::identity(base.clone()), dual: 0.0, iterations: 0, status: Status::Converged });
    }
    let g = cs.g();
    let c = cs.c();
    let breaks = cs.breakpoints();
    let m = 1 + k + k * (k + 1) / 2;
    let scale: Vec<f64> = c.iter().map(|v| v.abs().max(1.0)).collect();

    let prior_mean = match base {
        Prior::Cloud(_) => vec![],
        Prior::Density(_) => {
            base.expect_vec(eng, k, &breaks, &|x, o| cs.eval_into(x, o))?.values
        }
    };
    let shift_at = |l: &[f64]| -> f64 {
        match base {
            Prior::Cloud(cl) => cl
                .points()
                .iter()
                .map(|x| g.iter().zip(l).map(|(p, v)| v * p.eval(x)).sum::<f64>())
                .fold(f64::MIN, f64::max),
            Prior::Density(_) => prior_mean.iter().zip(l).map(|(a, b)| a * b).sum(),
        }
    };

    let eval = |lam: &DVector<f64>| -> Result<Option<Local>> {
        let l = lam.as_slice();
        let shift = shift_at(l);
        let est = base.expect_vec(eng, m, &breaks, &|x, o| {
            for i in 0..k {
                o[1 + i] = g[i].eval(x);
            }
            let s: f64 = (0..k).map(|i| l[i] * o[1 + i]).sum();
            let w = (s - shift).exp();
            o[0] = w;
            let mut p = 1 + k;
            for i in 0..k {
                for j in i..k {
                    o[p] = w * o[1 + i] * o[1 + j];
                    p += 1;
                }
            }
            for i in 0..k {
                o[1 + i] *= w;
            }
        });
        let v = match est {
            Ok(e) => e.values,
            Err(Error::DivergentIntegral(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let z = v[0];
        if !(z > 0.0 && z.is_finite()) || v.iter().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        let mean: Vec<f64> = (0..k).map(|i| v[1 + i] / z).collect();
        let mut hess = DMatrix::zeros(k, k);
        let mut p = 1 + k;
        for i in 0..k {
            for j in i..k {
                let cv = v[p] / z - mean[i] * mean[j];
                hess[(i, j)] = cv;
                hess[(j, i)] = cv;
                p += 1;
            }
        }
        let grad = DVector::from_iterator(k, (0..k).map(|i| mean[i] - c[i]));
        let resid = (0..k).map(|i| grad[i].abs() / scale[i]).fold(0.0, f64::max);
        let value = z.ln() + shift - l.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        Ok(Some(Local { value, grad, hess, resid }))
    };

    let x0 = DVector::from_vec(warm.unwrap_or_else(|| vec![0.0; k]));
    let out = minimize(x0, tol, max_iter, eval)?;
    if !out.converged {
        let why = if out.boundary_hits > 0 {
            "the dual diverges: views are inconsistent or the moment generating function does not exist near the solution"
        } else {
            "dual minimisation did not converge"
        };
        return Err(Error::Infeasible(format!("{why} (scaled residual {:.3e})", out.local.resid)));
    }
    let lambda = out.x.as_slice().to_vec();
    let shift = shift_at(&lambda);
    let lc: f64 = lambda.iter().zip(c).map(|(a, b)| a * b).sum();
    let z = (out.local.value - shift + lc).exp();
    let post = TiltedPosterior::exp_parts(base.clone(), g.to_vec(), lambda, shift, z);
    Ok(EqSolution { post, dual: out.local.value, iterations: out.iterations, status: Status::Converged })
}
