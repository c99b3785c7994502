//! Posteriors of minimum I-divergence or polynomial divergence under moment
//! views, and the solvers that produce them.

mod disjoint;
pub mod feasibility;
mod idiv;
pub(crate) mod newton;
mod poly;
mod single;
mod truncation;

pub use disjoint::{disjoint_set_update, Partition};
pub use feasibility::{CheckMode, FeasibilityChecker};
pub use idiv::{solve_i_divergence, solve_i_divergence_with};
pub use poly::{lambda_to_theta, solve_polynomial, solve_polynomial_with, suggest_beta, theta_to_lambda};
pub use single::{feasibility_bound, solve_single_constraint_poly};
pub use truncation::{truncated_pareto_diagnostic, TruncationPoint};

use crate::constraints::{ConstraintSet, Sense};
use crate::dist::{Estimate, ExpectationEngine, Prior, SampleCloud};
use crate::divergence::{i_divergence_with_breaks, polynomial_divergence_with_breaks, DivergenceValue};
use crate::error::{Error, Result};
use crate::payoff::Payoff;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    Infeasible,
    NotStronglyFeasible,
    DivergentIntegral,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Converged => "Converged",
            Status::Infeasible => "Infeasible",
            Status::NotStronglyFeasible => "NotStronglyFeasible",
            Status::DivergentIntegral => "DivergentIntegral",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// `|E_post[g_i] − c_i|`; for slack inequality views, the shortfall `max(0, c_i − E_post[g_i])`.
    pub residuals: Vec<f64>,
    pub dual_value: f64,
    pub iterations: usize,
    pub status: Status,
}

impl SolveReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(*r))
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Residual tolerance, relative to `max(1, |c_i|)`. Defaults to 1e-10, or
    /// 1e-4 when expectations are Monte-Carlo estimates.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Starting multipliers (zero when absent).
    pub initial: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: None, max_iter: 200, initial: None }
    }
}

impl SolverOptions {
    pub(crate) fn tolerance(&self, prior: &Prior, eng: &ExpectationEngine) -> f64 {
        self.tol.unwrap_or(if prior.is_sampled(eng) { 1e-4 } else { 1e-10 })
    }
}

#[derive(Debug, Clone)]
enum Form {
    Identity,
    /// `exp(Σ a_i g_i − shift) / z`
    Exponential { coeffs: Vec<f64>, shift: f64, z: f64 },
    /// `(offset + β Σ a_i g_i)^{1/β} / z`
    Polynomial { offset: f64, coeffs: Vec<f64>, z: f64 },
}

/// A posterior given by its ratio to the prior.
#[derive(Debug, Clone)]
pub struct TiltedPosterior {
    base: Prior,
    g: Vec<Payoff>,
    lambda: Vec<f64>,
    beta: Option<f64>,
    form: Form,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TiltedPosterior {
    /// The prior itself.
    pub fn identity(base: Prior) -> Self {
        Self { base, g: vec![], lambda: vec![], beta: None, form: Form::Identity }
    }

    /// Exponential tilt `e^{Σλg}` normalised under the prior.
    pub fn exponential(base: Prior, g: Vec<Payoff>, lambda: Vec<f64>, eng: &ExpectationEngine) -> Result<Self> {
        check_len(&g, &lambda)?;
        let breaks: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
        let shift = exp_shift(&base, &g, &lambda, eng, &breaks)?;
        let z = base
            .expect_vec(eng, 1, &breaks, &|x, o| {
                let s: f64 = g.iter().zip(&lambda).map(|(p, l)| l * p.eval(x)).sum();
                o[0] = (s - shift).exp();
            })?
            .value();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::DivergentIntegral(format!("exponential tilt has normaliser {z}")));
        }
        Ok(Self { base, g, lambda: lambda.clone(), beta: None, form: Form::Exponential { coeffs: lambda, shift, z } })
    }

    /// Polynomial tilt `(1 + βΣλg)^{1/β}`, which must be nonnegative on the support.
    pub fn polynomial(base: Prior, g: Vec<Payoff>, lambda: Vec<f64>, beta: f64, eng: &ExpectationEngine) -> Result<Self> {
        check_len(&g, &lambda)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
        }
        let a: Vec<f64> = lambda.iter().map(|l| beta * l).collect();
        if !FeasibilityChecker::new(&base, &g).affine_nonneg(1.0, &a) {
            return Err(Error::Infeasible("1 + β Σ λ g takes negative values on the support".into()));
        }
        let mut post =
            Self { base, g, lambda: lambda.clone(), beta: Some(beta), form: Form::Polynomial { offset: 1.0, coeffs: lambda, z: 1.0 } };
        let z = post.raw_mass(eng)?;
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::DivergentIntegral(format!("polynomial tilt has normaliser {z}")));
        }
        if let Form::Polynomial { z: zz, .. } = &mut post.form {
            *zz = z;
        }
        Ok(post)
    }

    pub(crate) fn exp_parts(base: Prior, g: Vec<Payoff>, lambda: Vec<f64>, shift: f64, z: f64) -> Self {
        Self { base, g, lambda: lambda.clone(), beta: None, form: Form::Exponential { coeffs: lambda, shift, z } }
    }

    /// Polynomial form `(offset + βΣ coeffs·g)^{1/β}/z` reporting `lambda`.
    pub(crate) fn poly_parts(
        base: Prior,
        g: Vec<Payoff>,
        lambda: Vec<f64>,
        beta: f64,
        offset: f64,
        coeffs: Vec<f64>,
        z: f64,
    ) -> Self {
        Self { base, g, lambda, beta: Some(beta), form: Form::Polynomial { offset, coeffs, z } }
    }

    fn raw_mass(&self, eng: &ExpectationEngine) -> Result<f64> {
        let z_old = match &self.form {
            Form::Polynomial { z, .. } | Form::Exponential { z, .. } => *z,
            Form::Identity => 1.0,
        };
        Ok(self.expect_vec(eng, 1, &[], &|_, o| o[0] = 1.0)?.value() * z_old)
    }

    /// Copy with the views extended to `g_full`; `idx[j]` is the position of
    /// the current view `j`, other multipliers are zero.
    pub(crate) fn expanded(&self, g_full: &[Payoff], idx: &[usize]) -> Self {
        let k = g_full.len();
        let spread = |v: &[f64]| {
            let mut out = vec![0.0; k];
            for (j, &i) in idx.iter().enumerate() {
                out[i] = v[j];
            }
            out
        };
        let form = match &self.form {
            Form::Identity => Form::Identity,
            Form::Exponential { coeffs, shift, z } => Form::Exponential { coeffs: spread(coeffs), shift: *shift, z: *z },
            Form::Polynomial { offset, coeffs, z } => Form::Polynomial { offset: *offset, coeffs: spread(coeffs), z: *z },
        };
        Self { base: self.base.clone(), g: g_full.to_vec(), lambda: spread(&self.lambda), beta: self.beta, form }
    }

    pub fn base(&self) -> &Prior {
        &self.base
    }

    pub fn views(&self) -> &[Payoff] {
        &self.g
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `None` for the exponential (I-divergence) form.
    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    /// `∫ e^{Σλg} dμ` or `∫ (1+βΣλg)^{1/β} dμ`; may overflow for large tilts.
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer().exp()
    }

    pub fn log_normalizer(&self) -> f64 {
        match &self.form {
            Form::Identity => 0.0,
            Form::Exponential { shift, z, .. } => z.ln() + shift,
            Form::Polynomial { offset, z, .. } => {
                let beta = self.beta.unwrap_or(1.0);
                // reported in the 1 + βΣλg scale
                z.ln() - offset.abs().ln() / beta
            }
        }
    }

    /// `dν/dμ` at `x`.
    pub fn ratio(&self, x: &[f64]) -> f64 {
        match &self.form {
            Form::Identity => 1.0,
            Form::Exponential { coeffs, shift, z } => {
                let s: f64 = self.g.iter().zip(coeffs).map(|(p, l)| if *l == 0.0 { 0.0 } else { l * p.eval(x) }).sum();
                (s - shift).exp() / z
            }
            Form::Polynomial { offset, coeffs, z } => {
                let beta = self.beta.unwrap_or(1.0);
                let s: f64 = self.g.iter().zip(coeffs).map(|(p, l)| if *l == 0.0 { 0.0 } else { l * p.eval(x) }).sum();
                let u = offset + beta * s;
                if u <= 0.0 {
                    0.0
                } else {
                    u.powf(1.0 / beta) / z
                }
            }
        }
    }

    /// Posterior density; errors for sample-cloud priors.
    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        match &self.base {
            Prior::Density(d) => {
                let p = d.pdf(x);
                Ok(if p == 0.0 { 0.0 } else { p * self.ratio(x) })
            }
            Prior::Cloud(_) => Err(Error::InvalidInput("a sample-cloud posterior has no density".into())),
        }
    }

    pub fn breaks(&self) -> Vec<(usize, f64)> {
        self.g.iter().flat_map(|p| p.breakpoints()).collect()
    }

    /// `E_post[φ]` for a vector-valued `φ`.
    pub fn expect_vec(
        &self,
        eng: &ExpectationEngine,
        m: usize,
        extra_breaks: &[(usize, f64)],
        phi: crate::dist::VecFn,
    ) -> Result<Estimate> {
        let mut breaks = self.breaks();
        breaks.extend_from_slice(extra_breaks);
        self.base.expect_vec(eng, m, &breaks, &|x, o| {
            let r = self.ratio(x);
            if r == 0.0 {
                o.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            phi(x, o);
            o.iter_mut().for_each(|v| *v *= r);
        })
    }

    pub fn expectation(&self, eng: &ExpectationEngine, phi: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Result<f64> {
        Ok(self.expect_vec(eng, 1, &[], &|x, o| o[0] = phi(x))?.value())
    }

    /// `E_post[g_i]` for the stored views.
    pub fn moments(&self, eng: &ExpectationEngine) -> Result<Vec<f64>> {
        self.moments_of(&self.g, eng)
    }

    pub fn moments_of(&self, g: &[Payoff], eng: &ExpectationEngine) -> Result<Vec<f64>> {
        if g.is_empty() {
            return Ok(vec![]);
        }
        let br: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
        Ok(self
            .expect_vec(eng, g.len(), &br, &|x, o| {
                for (v, p) in o.iter_mut().zip(g) {
                    *v = p.eval(x);
                }
            })?
            .values)
    }

    /// Reweighted cloud: the base cloud itself, or `n` prior draws.
    pub fn to_cloud(&self, n: usize, seed: u64) -> Result<SampleCloud> {
        let c = match &self.base {
            Prior::Cloud(c) => c.clone(),
            Prior::Density(d) => d.sample(n, seed)?,
        };
        c.reweight(|x| self.ratio(x))
    }

    pub fn i_divergence(&self, eng: &ExpectationEngine) -> Result<DivergenceValue> {
        i_divergence_with_breaks(&|x| self.ratio(x), &self.base, eng, &self.breaks())
    }

    pub fn polynomial_divergence(&self, beta: f64, eng: &ExpectationEngine) -> Result<DivergenceValue> {
        polynomial_divergence_with_breaks(&|x| self.ratio(x), &self.base, beta, eng, &self.breaks())
    }
}

fn check_len(g: &[Payoff], lambda: &[f64]) -> Result<()> {
    if g.len() != lambda.len() {
        return Err(Error::InvalidInput(format!("{} views but {} multipliers", g.len(), lambda.len())));
    }
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("multipliers must be finite".into()));
    }
    Ok(())
}

/// Shift keeping `e^{λ·g − shift}` in range: the cloud maximum, or `λ·E_μ[g]`.
pub(crate) fn exp_shift(
    base: &Prior,
    g: &[Payoff],
    lambda: &[f64],
    eng: &ExpectationEngine,
    breaks: &[(usize, f64)],
) -> Result<f64> {
    if lambda.iter().all(|l| *l == 0.0) {
        return Ok(0.0);
    }
    match base {
        Prior::Cloud(c) => {
            Ok(c.points().iter().map(|x| g.iter().zip(lambda).map(|(p, l)| l * p.eval(x)).sum::<f64>()).fold(f64::MIN, f64::max))
        }
        Prior::Density(_) => {
            let m = base
                .expect_vec(eng, g.len(), breaks, &|x, o| {
                    for (v, p) in o.iter_mut().zip(g) {
                        *v = p.eval(x);
                    }
                })?
                .values;
            Ok(dot(&m, lambda))
        }
    }
}

/// Solution of an equality-only subproblem.
pub(crate) struct EqSolution {
    pub post: TiltedPosterior,
    pub dual: f64,
    pub iterations: usize,
    pub status: Status,
}

/// Active-set loop over inequality views: solve with the current working set
/// as equalities, drop the most negative inequality multiplier, add the most
/// violated slack inequality, one change per round.
pub(crate) fn active_set(
    cs: &ConstraintSet,
    tol: f64,
    eng: &ExpectationEngine,
    initial: Option<&[f64]>,
    mut solve: impl FnMut(&ConstraintSet, Option<Vec<f64>>) -> Result<EqSolution>,
) -> Result<(TiltedPosterior, SolveReport)> {
    let k = cs.k();
    let mut active = vec![true; k];
    let mut full = initial.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; k]);
    if full.len() != k {
        return Err(Error::InvalidInput(format!("initial multipliers have length {}, expected {k}", full.len())));
    }
    let mut iterations = 0;
    let scale = |i: usize| cs.c()[i].abs().max(1.0);
    for _ in 0..(2 * k + 5) {
        let idx: Vec<usize> = (0..k).filter(|&i| active[i]).collect();
        let sub = cs.restricted(&idx);
        let warm: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
        let sol = solve(&sub, Some(warm))?;
        iterations += sol.iterations;
        let lam = sol.post.lambda().to_vec();
        full = vec![0.0; k];
        for (j, &i) in idx.iter().enumerate() {
            full[i] = lam[j];
        }
        let drop = idx
            .iter()
            .enumerate()
            .filter(|(_, &i)| cs.sense()[i] == Sense::Geq)
            .filter(|(j, _)| lam[*j] < -1e-10 * (1.0 + lam[*j].abs()))
            .min_by(|a, b| lam[a.0].partial_cmp(&lam[b.0]).unwrap());
        if let Some((_, &i)) = drop {
            active[i] = false;
            full[i] = 0.0;
            continue;
        }
        let post = sol.post.expanded(cs.g(), &idx);
        let mom = post.moments_of(cs.g(), eng)?;
        let add = (0..k)
            .filter(|&i| !active[i])
            .map(|i| (i, (cs.c()[i] - mom[i]) / scale(i)))
            .filter(|(_, v)| *v > tol)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if let Some((i, _)) = add {
            active[i] = true;
            continue;
        }
        let residuals = (0..k)
            .map(|i| if active[i] { (mom[i] - cs.c()[i]).abs() } else { (cs.c()[i] - mom[i]).max(0.0) })
            .collect();
        let report = SolveReport { residuals, dual_value: sol.dual, iterations, status: sol.status };
        return Ok((post, report));
    }
    Err(Error::Infeasible("inequality working set did not settle".into()))
}
