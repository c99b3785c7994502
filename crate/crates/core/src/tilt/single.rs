//! One nonnegative view `E_ν[g] = a·E_μ[g]` under the polynomial divergence
//! with `β = 1/n`: the multiplier is the positive root of a degree-`n` polynomial.

use super::{SolveReport, Status, TiltedPosterior};
use crate::dist::{ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;
use crate::roots::{bracket_up, brent};

fn check_n(n: u32) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be a positive integer".into()));
    }
    Ok(())
}

fn check_nonneg(prior: &Prior, g: &Payoff) -> Result<()> {
    let support = prior.support();
    if g.is_nonneg_on(&support) {
        return Ok(());
    }
    let probes = prior.probe_points(10_000, 7);
    if probes.iter().any(|x| g.eval(x) < 0.0) {
        return Err(Error::InvalidInput("the view function must be nonnegative on the support".into()));
    }
    Ok(())
}

/// `m_j = E_μ[g^j]` for `j = 0..=n+1`.
fn power_moments(prior: &Prior, g: &Payoff, n: u32, eng: &ExpectationEngine) -> Result<Vec<f64>> {
    let m = n as usize + 1;
    let est = prior.expect_vec(eng, m, &g.breakpoints(), &|x, o| {
        let v = g.eval(x);
        let mut p = v;
        for slot in o.iter_mut() {
            *slot = p;
            p *= v;
        }
    })?;
    if est.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergentIntegral(format!("moment of order {} is not finite", n + 1)));
    }
    let mut out = vec![1.0];
    out.extend(est.values);
    Ok(out)
}

/// Upper end `E[g^{n+1}] / (E[g] E[g^n])` of the attainable ratio interval.
pub fn feasibility_bound(prior: &Prior, g: &Payoff, n: u32, eng: &ExpectationEngine) -> Result<f64> {
    check_n(n)?;
    let prior = prior.materialize(eng)?;
    let m = power_moments(&prior, g, n, eng)?;
    let n = n as usize;
    if !(m[1] > 0.0) {
        return Err(Error::InvalidInput("the view has zero prior mean".into()));
    }
    Ok(m[n + 1] / (m[1] * m[n]))
}

fn binom(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Posterior `∝ (1 + λg/n)^n f` with `E_ν[g] = a·E_μ[g]`, for `a` in
/// `[1, feasibility_bound)`.
pub fn solve_single_constraint_poly(
    prior: &Prior,
    g: &Payoff,
    a: f64,
    n: u32,
    eng: &ExpectationEngine,
) -> Result<(TiltedPosterior, SolveReport)> {
    check_n(n)?;
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("ratio must be finite, got {a}")));
    }
    let prior = prior.materialize(eng)?;
    check_nonneg(&prior, g)?;
    let m = power_moments(&prior, g, n, eng)?;
    let nu = n as usize;
    if !(m[1] > 0.0) {
        return Err(Error::InvalidInput("the view has zero prior mean".into()));
    }
    let bound = m[nu + 1] / (m[1] * m[nu]);
    let beta = 1.0 / n as f64;
    if a == 1.0 {
        let post = TiltedPosterior::polynomial(prior, vec![g.clone()], vec![0.0], beta, eng)?;
        let report = SolveReport { residuals: vec![0.0], dual_value: 1.0, iterations: 0, status: Status::Converged };
        return Ok((post, report));
    }
    if !(a > 1.0 && a < bound) {
        return Err(Error::Infeasible(format!("ratio {a} lies outside the attainable interval [1, {bound})")));
    }
    // Σ_k n^{-k} C(n,k) (m_{k+1} − a m_1 m_k) λ^k
    let coef: Vec<f64> = (0..=n)
        .map(|k| binom(n, k) * (n as f64).powi(-(k as i32)) * (m[k as usize + 1] - a * m[1] * m[k as usize]))
        .collect();
    let poly = |l: f64| coef.iter().rev().fold(0.0, |acc, c| acc * l + c);
    let first = 1e-3 / m[1].max(1e-300);
    let (lo, hi) = bracket_up(poly, 0.0, first, f64::MAX / 4.0)?;
    let lambda = brent(poly, lo, hi, 1e-15 * hi.abs().max(1e-300), 500)?;
    let post = TiltedPosterior::polynomial(prior, vec![g.clone()], vec![lambda], beta, eng)?;
    let mp = post.moments(eng)?[0];
    let target = a * m[1];
    let report = SolveReport {
        residuals: vec![(mp - target).abs()],
        dual_value: post.polynomial_divergence(beta, eng)?.value,
        iterations: 0,
        status: Status::Converged,
    };
    Ok((post, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Density;

    #[test]
    fn closed_form_bounds() {
        let eng = ExpectationEngine::default();
        let ln = Prior::Density(Density::lognormal(0.0, 0.04).unwrap());
        assert!((feasibility_bound(&ln, &Payoff::identity(), 1, &eng).unwrap() - 0.04f64.exp()).abs() < 1e-10);
        let gm = Prior::Density(Density::gamma(3.0, 2.5).unwrap());
        assert!((feasibility_bound(&gm, &Payoff::identity(), 2, &eng).unwrap() - 5.0 / 3.0).abs() < 1e-10);
        let pa = Prior::Density(Density::pareto(5.0).unwrap());
        // (α−n−1)(α−2)/((α−n−2)(α−1)) belongs to 1 + X; X itself gives 2(α−2)/(α−3)
        let shifted = Payoff::Linear { coeffs: vec![1.0], offset: 1.0 };
        assert!((feasibility_bound(&pa, &shifted, 1, &eng).unwrap() - 9.0 / 8.0).abs() < 1e-9);
        assert!((feasibility_bound(&pa, &Payoff::identity(), 1, &eng).unwrap() - 3.0).abs() < 1e-9);
        assert!(matches!(feasibility_bound(&pa, &Payoff::identity(), 3, &eng), Err(Error::DivergentIntegral(_))));
        let one = Payoff::custom(|_| 1.0);
        assert!((feasibility_bound(&gm, &one, 2, &eng).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn root_reproduces_the_target() {
        let eng = ExpectationEngine::default();
        let gm = Prior::Density(Density::gamma(2.0, 1.0).unwrap());
        for n in [1, 2, 3] {
            let (post, rep) = solve_single_constraint_poly(&gm, &Payoff::identity(), 1.2, n, &eng).unwrap();
            assert!(post.lambda()[0] > 0.0);
            assert!(rep.residuals[0] < 1e-10);
        }
        // n = 1: λ = m1(a − 1)/(m2 − a m1²) = 1/3
        let (post, _) = solve_single_constraint_poly(&gm, &Payoff::identity(), 1.2, 1, &eng).unwrap();
        assert!((post.lambda()[0] - 1.0 / 3.0).abs() < 1e-13);
        assert!(matches!(
            solve_single_constraint_poly(&gm, &Payoff::identity(), 1.5, 1, &eng),
            Err(Error::Infeasible(_))
        ));
        let (post, _) = solve_single_constraint_poly(&gm, &Payoff::identity(), 1.0, 1, &eng).unwrap();
        assert_eq!(post.lambda()[0], 0.0);
    }
}
