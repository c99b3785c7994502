//! Gaussian priors with a replaced marginal: the closed-form posterior, its
//! marginal tails and Value-at-Risk by simulation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dist::{Density, DensityKind, ExpectationEngine};
use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadSettings, Segment};

/// `N(μ, Σ)` over `(X, Y)` in block form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub sigma_xy: DMatrix<f64>,
    pub sigma_yx: DMatrix<f64>,
    pub sigma_yy: DMatrix<f64>,
}

impl GaussianPrior {
    /// Split `N(mean, cov)` with `X` the coordinates in `x_idx` and `Y` the rest in order.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, x_idx: &[usize]) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::InvalidInput("covariance shape does not match mean".into()));
        }
        let mut seen = vec![false; n];
        for &i in x_idx {
            if i >= n || seen[i] {
                return Err(Error::InvalidInput(format!("bad marginal index {i}")));
            }
            seen[i] = true;
        }
        let y_idx: Vec<usize> = (0..n).filter(|i| !seen[*i]).collect();
        if x_idx.is_empty() || y_idx.is_empty() {
            return Err(Error::InvalidInput("both X and Y blocks must be nonempty".into()));
        }
        let pick = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| cov[(r[i], c[j])]);
        Self::from_blocks(
            DVector::from_iterator(x_idx.len(), x_idx.iter().map(|&i| mean[i])),
            DVector::from_iterator(y_idx.len(), y_idx.iter().map(|&i| mean[i])),
            pick(x_idx, x_idx),
            pick(x_idx, &y_idx),
            pick(&y_idx, &y_idx),
        )
    }

    pub fn from_blocks(
        mu_x: DVector<f64>,
        mu_y: DVector<f64>,
        sigma_xx: DMatrix<f64>,
        sigma_xy: DMatrix<f64>,
        sigma_yy: DMatrix<f64>,
    ) -> Result<Self> {
        let (p, q) = (mu_x.len(), mu_y.len());
        if p == 0 || q == 0 {
            return Err(Error::InvalidInput("both X and Y blocks must be nonempty".into()));
        }
        if sigma_xx.shape() != (p, p) || sigma_xy.shape() != (p, q) || sigma_yy.shape() != (q, q) {
            return Err(Error::InvalidInput("covariance blocks do not match the mean blocks".into()));
        }
        let prior = Self { mu_x, mu_y, sigma_yx: sigma_xy.transpose(), sigma_xx, sigma_xy, sigma_yy };
        // symmetric and PSD checks
        Density::gaussian_nd(prior.mean(), prior.cov())?;
        Ok(prior)
    }

    pub fn dim_x(&self) -> usize {
        self.mu_x.len()
    }

    pub fn dim_y(&self) -> usize {
        self.mu_y.len()
    }

    /// Mean of `(X, Y)`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim_x() + self.dim_y());
        m.rows_mut(0, self.dim_x()).copy_from(&self.mu_x);
        m.rows_mut(self.dim_x(), self.dim_y()).copy_from(&self.mu_y);
        m
    }

    /// Covariance of `(X, Y)`.
    pub fn cov(&self) -> DMatrix<f64> {
        let (p, q) = (self.dim_x(), self.dim_y());
        let mut c = DMatrix::zeros(p + q, p + q);
        c.view_mut((0, 0), (p, p)).copy_from(&self.sigma_xx);
        c.view_mut((0, p), (p, q)).copy_from(&self.sigma_xy);
        c.view_mut((p, 0), (q, p)).copy_from(&self.sigma_yx);
        c.view_mut((p, p), (q, q)).copy_from(&self.sigma_yy);
        c
    }

    pub fn density(&self) -> Result<Density> {
        Density::gaussian_nd(self.mean(), self.cov())
    }

    /// The `X` marginal `N(μ_x, Σ_xx)`.
    pub fn x_marginal(&self) -> Result<Density> {
        Density::gaussian_nd(self.mu_x.clone(), self.sigma_xx.clone())
    }
}

/// Posterior with `X ~ g` and `Y | X = x ~ N(intercept + slope·x, cond_cov)`.
#[derive(Debug, Clone)]
pub struct MarkowitzPosterior {
    pub g_marginal: Density,
    /// `Σ_yx Σ_xx⁻¹`
    pub cond_mean_slope: DMatrix<f64>,
    /// `a − Σ_yx Σ_xx⁻¹ E_g[X]`
    pub cond_mean_intercept: DVector<f64>,
    /// `Σ_yy − Σ_yx Σ_xx⁻¹ Σ_xy`
    pub cond_cov: DMatrix<f64>,
    /// Multiplier of the tilt `e^{λ·y}` on the conditional law.
    pub lambda: DVector<f64>,
    pub g_mean: DVector<f64>,
    pub target: DVector<f64>,
    cond_factor: DMatrix<f64>,
}

/// Mean of a density: closed form where known, quadrature otherwise.
pub fn density_mean(g: &Density) -> Result<DVector<f64>> {
    let scalar = |v: f64| Ok(DVector::from_element(1, v));
    match g.kind() {
        DensityKind::GaussianNd { mean, .. } => Ok(mean.clone()),
        DensityKind::StudentT { dof, loc, .. } => {
            if *dof <= 1.0 {
                return Err(Error::DivergentIntegral(format!("t with {dof} degrees of freedom has no mean")));
            }
            scalar(*loc)
        }
        DensityKind::Exponential { rate } => scalar(1.0 / rate),
        DensityKind::Lognormal { mu, sigma2 } => scalar((mu + 0.5 * sigma2).exp()),
        DensityKind::Gamma { shape, rate } => scalar(shape / rate),
        DensityKind::Pareto { alpha } => {
            if *alpha <= 2.0 {
                return Err(Error::DivergentIntegral(format!("pareto with alpha {alpha} has no mean")));
            }
            scalar(1.0 / (alpha - 2.0))
        }
        DensityKind::Custom { .. } => {
            let d = g.dim();
            let est = ExpectationEngine::default().expect_vec(g, d, &[], &|x, o| o.copy_from_slice(x))?;
            if est.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergentIntegral("marginal has no finite mean".into()));
            }
            Ok(DVector::from_vec(est.values))
        }
    }
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let inv = eig.eigenvalues.map(|v| if v > 1e-12 * top { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Minimum I-divergence posterior with `X`-marginal `g` and `E[Y] = a`.
pub fn markowitz_update(prior: &GaussianPrior, g: &Density, a: &DVector<f64>) -> Result<MarkowitzPosterior> {
    if g.dim() != prior.dim_x() {
        return Err(Error::InvalidInput(format!("marginal has dimension {}, X has {}", g.dim(), prior.dim_x())));
    }
    if a.len() != prior.dim_y() {
        return Err(Error::InvalidInput(format!("target has length {}, Y has {}", a.len(), prior.dim_y())));
    }
    let xx_inv = prior
        .sigma_xx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularBlock("Σ_xx is not invertible".into()))?;
    let g_mean = density_mean(g)?;
    let slope = &prior.sigma_yx * &xx_inv;
    let intercept = a - &slope * &g_mean;
    let cond = &prior.sigma_yy - &slope * &prior.sigma_xy;
    let cond = 0.5 * (&cond + cond.transpose());
    let shift = a - &prior.mu_y - &slope * (&g_mean - &prior.mu_x);
    let lambda = match cond.clone().cholesky() {
        Some(c) => c.solve(&shift),
        None => pinv(&cond) * &shift,
    };
    let cond_factor = Density::gaussian_nd(DVector::zeros(prior.dim_y()), cond.clone())?
        .gaussian_factor()
        .cloned()
        .expect("gaussian factor");
    Ok(MarkowitzPosterior {
        g_marginal: g.clone(),
        cond_mean_slope: slope,
        cond_mean_intercept: intercept,
        cond_cov: cond,
        lambda,
        g_mean,
        target: a.clone(),
        cond_factor,
    })
}

impl MarkowitzPosterior {
    pub fn dim_x(&self) -> usize {
        self.cond_mean_slope.ncols()
    }

    pub fn dim_y(&self) -> usize {
        self.cond_mean_slope.nrows()
    }

    pub fn cond_mean(&self, x: &[f64]) -> DVector<f64> {
        &self.cond_mean_intercept + &self.cond_mean_slope * DVector::from_column_slice(x)
    }

    /// Joint density at `(x, y)`; NaN when the conditional covariance is singular.
    pub fn pdf(&self, x: &[f64], y: &[f64]) -> f64 {
        let gx = self.g_marginal.pdf(x);
        if gx == 0.0 {
            return 0.0;
        }
        match Density::gaussian_nd(self.cond_mean(x), self.cond_cov.clone()) {
            Ok(d) => gx * d.pdf(y),
            Err(_) => f64::NAN,
        }
    }

    /// `n` draws of `(x, y)`, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let xs = self.g_marginal.sample(n, seed)?;
        let q = self.dim_y();
        const CHUNK: usize = 4096;
        let out: Vec<Vec<f64>> = xs
            .points()
            .par_chunks(CHUNK)
            .enumerate()
            .flat_map_iter(|(ci, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                rng.set_stream(ci as u64 + 1);
                let mut z = DVector::zeros(q);
                chunk
                    .iter()
                    .map(|x| {
                        for v in z.iter_mut() {
                            *v = StandardNormal.sample(&mut rng);
                        }
                        let y = self.cond_mean(x) + &self.cond_factor * &z;
                        x.iter().copied().chain(y.iter().copied()).collect()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(out)
    }

    /// Density of `Y_component` at `s` for a one-dimensional `X`.
    pub fn y_marginal_pdf(&self, component: usize, s: f64) -> Result<f64> {
        if self.dim_x() != 1 {
            return Err(Error::InvalidInput("marginal tails need a one-dimensional X".into()));
        }
        if component >= self.dim_y() {
            return Err(Error::InvalidInput(format!("component {component} out of range")));
        }
        let b = self.cond_mean_slope[(component, 0)];
        let m = self.cond_mean_intercept[component];
        let v = self.cond_cov[(component, component)];
        let g = &self.g_marginal;
        if v <= 0.0 {
            if b == 0.0 {
                return Ok(if s == m { f64::INFINITY } else { 0.0 });
            }
            return Ok(g.pdf(&[(s - m) / b]) / b.abs());
        }
        let sd = v.sqrt();
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let mut cuts = vec![density_mean(g).map(|v| v[0]).unwrap_or(0.0)];
        let width = if b != 0.0 { sd / b.abs() } else { 1.0 };
        if b != 0.0 {
            let peak = (s - m) / b;
            cuts.extend([peak - 10.0 * width, peak, peak + 10.0 * width]);
        }
        let (lo, hi) = g.support()[0];
        cuts.retain(|c| *c > lo && *c < hi);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut segs = Vec::new();
        let first = cuts.first().copied();
        let last = cuts.last().copied();
        match first {
            None => segs.push(Segment::Finite { lo, hi }),
            Some(f) => {
                segs.push(if lo.is_finite() { Segment::Finite { lo, hi: f } } else { Segment::Lower { hi: f, scale: width } });
                for w in cuts.windows(2) {
                    segs.push(Segment::Finite { lo: w[0], hi: w[1] });
                }
                let l = last.unwrap();
                segs.push(if hi.is_finite() { Segment::Finite { lo: l, hi } } else { Segment::Upper { lo: l, scale: width } });
            }
        }
        let cfg = QuadSettings { abs_tol: 1e-300, rel_tol: 1e-10, max_intervals: 4000 };
        let r = integrate(
            |x, o| {
                let z = (s - m - b * x) / sd;
                o[0] = g.pdf(&[x]) * norm * (-0.5 * z * z).exp();
            },
            &segs,
            1,
            &cfg,
        )?;
        Ok(r.values[0])
    }
}

/// Tail index of the marginal's density (`g(s) ~ s^{-α}`), known for t and Pareto laws.
pub fn tail_index(g: &Density) -> Option<f64> {
    match g.kind() {
        DensityKind::StudentT { dof, .. } => Some(dof + 1.0),
        DensityKind::Pareto { alpha } => Some(*alpha),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailRatio {
    /// `(s, f̃_{Y}(s) / g(s))`
    pub points: Vec<(f64, f64)>,
    /// `(σ_xy/σ_xx)^{α−1}`, when the tail index is known.
    pub limit: Option<f64>,
}

/// Ratio of the posterior marginal density of `Y_component` to `g` along `s_grid`.
/// `alpha` overrides the tail index inferred from `g`.
pub fn tail_ratio_diagnostic(post: &MarkowitzPosterior, component: usize, s_grid: &[f64], alpha: Option<f64>) -> Result<TailRatio> {
    if post.dim_x() != 1 {
        return Err(Error::InvalidInput("tail ratios need a one-dimensional X".into()));
    }
    if component >= post.dim_y() {
        return Err(Error::InvalidInput(format!("component {component} out of range")));
    }
    let b = post.cond_mean_slope[(component, 0)];
    if b == 0.0 {
        return Err(Error::InvalidInput("σ_xy is zero for this component; the tail limit does not apply".into()));
    }
    if s_grid.iter().any(|s| !s.is_finite()) || s_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("s grid must be finite and increasing".into()));
    }
    let points = s_grid
        .iter()
        .map(|&s| Ok((s, post.y_marginal_pdf(component, s)? / post.g_marginal.pdf(&[s]))))
        .collect::<Result<Vec<_>>>()?;
    let limit = alpha.or_else(|| tail_index(&post.g_marginal)).map(|a| b.abs().powf(a - 1.0));
    Ok(TailRatio { points, limit })
}

/// Empirical loss quantiles of `−notional · wᵀ(x, y)` under the posterior.
pub fn var_estimate(
    post: &MarkowitzPosterior,
    weights: &[f64],
    notional: f64,
    levels: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("portfolio weights are empty".into()));
    }
    if weights.len() != post.dim_x() + post.dim_y() {
        return Err(Error::InvalidInput(format!(
            "expected {} weights over (X, Y), got {}",
            post.dim_x() + post.dim_y(),
            weights.len()
        )));
    }
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::InvalidInput("confidence levels must lie in (0, 1)".into()));
    }
    if n < 10_000 {
        return Err(Error::InvalidInput(format!("at least 10000 samples are required, got {n}")));
    }
    let draws = post.sample(n, seed)?;
    let mut losses: Vec<f64> =
        draws.par_iter().map(|p| -notional * p.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>()).collect();
    losses.par_sort_unstable_by(|a, b| a.total_cmp(b));
    Ok(levels
        .iter()
        .map(|&l| {
            let idx = ((l * n as f64).ceil() as usize).clamp(1, n) - 1;
            (l, losses[idx])
        })
        .collect())
}

/// How a standard-t view on `X` is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TScaling {
    /// `X = loc + sd·T`, with `sd` the prior standard deviation.
    #[default]
    PriorSd,
    /// Scale chosen so that `Var(X)` equals the prior variance.
    MatchVariance,
}

/// Student-t marginal view `X = loc + scale·T_dof`.
pub fn t_view(dof: f64, loc: f64, prior_var: f64, scaling: TScaling) -> Result<Density> {
    if !(prior_var > 0.0) {
        return Err(Error::InvalidInput("prior variance must be positive".into()));
    }
    let sd = prior_var.sqrt();
    let scale = match scaling {
        TScaling::PriorSd => sd,
        TScaling::MatchVariance => {
            if dof <= 2.0 {
                return Err(Error::InvalidInput("variance matching needs more than 2 degrees of freedom".into()));
            }
            sd * ((dof - 2.0) / dof).sqrt()
        }
    };
    Density::student_t(dof, loc, scale)
}
