//! Attainable mean ratios `(a, b)` for two-view polynomial tilts
//! `(1 + λx/n + ξy/n)^n` of a bivariate prior, `n = 1/β`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dist::{Density, ExpectationEngine};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum SweepPrior {
    /// `(log X, log Y)` Gaussian.
    Lognormal { mean: [f64; 2], cov: [[f64; 2]; 2] },
    /// Any density on `[0, ∞)²`.
    Density(Density),
}

impl SweepPrior {
    pub fn lognormal(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(cov[0][0] > 0.0 && cov[1][1] > 0.0 && det > 0.0 && cov[0][1] == cov[1][0]) {
            return Err(Error::InvalidInput("log-covariance must be symmetric positive definite".into()));
        }
        Ok(Self::Lognormal { mean, cov })
    }

    /// Standard lognormal pair with log-correlation `rho`.
    pub fn correlated(rho: f64) -> Result<Self> {
        Self::lognormal([0.0, 0.0], [[1.0, rho], [rho, 1.0]])
    }

    /// `E[X^i Y^j]` in closed form for the lognormal case.
    fn raw_moment(&self, i: u32, j: u32) -> Option<f64> {
        match self {
            Self::Lognormal { mean, cov } => {
                let (i, j) = (i as f64, j as f64);
                let v = i * i * cov[0][0] + 2.0 * i * j * cov[0][1] + j * j * cov[1][1];
                Some((i * mean[0] + j * mean[1] + 0.5 * v).exp())
            }
            Self::Density(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub xi: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Grid points whose expectations diverged or failed.
    pub skipped: usize,
}

fn multinomial_ratios(p: &SweepPrior, n: u32, lambda: f64, xi: f64) -> Option<(f64, f64)> {
    let nf = n as f64;
    let (l, x) = (lambda / nf, xi / nf);
    let mut z = 0.0;
    let mut ex = 0.0;
    let mut ey = 0.0;
    // (1 + lX + xY)^n = Σ n!/(i! j! k!) l^i x^j X^i Y^j
    let mut binom_n = 1.0;
    for i in 0..=n {
        let mut binom_r = 1.0;
        for j in 0..=(n - i) {
            let c = binom_n * binom_r * l.powi(i as i32) * x.powi(j as i32);
            if c != 0.0 {
                z += c * p.raw_moment(i, j)?;
                ex += c * p.raw_moment(i + 1, j)?;
                ey += c * p.raw_moment(i, j + 1)?;
            }
            binom_r *= (n - i - j) as f64 / (j + 1) as f64;
        }
        binom_n *= (n - i) as f64 / (i + 1) as f64;
    }
    let (mx, my) = (p.raw_moment(1, 0)?, p.raw_moment(0, 1)?);
    Some((ex / (mx * z), ey / (my * z)))
}

fn engine_ratios(p: &SweepPrior, n: f64, lambda: f64, xi: f64, eng: &ExpectationEngine) -> Result<(f64, f64)> {
    let w = move |x: f64, y: f64| (1.0 + lambda * x / n + xi * y / n).max(0.0).powf(n);
    let vals = match p {
        SweepPrior::Lognormal { mean, cov } => {
            let d = Density::gaussian_nd(
                DVector::from_column_slice(mean),
                DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]),
            )?;
            eng.expect_vec(&d, 5, &[], &|u, o| {
                let (x, y) = (u[0].exp(), u[1].exp());
                let f = w(x, y);
                o.copy_from_slice(&[f, x * f, y * f, x, y]);
            })?
        }
        SweepPrior::Density(d) => eng.expect_vec(d, 5, &[], &|u, o| {
            let f = w(u[0], u[1]);
            o.copy_from_slice(&[f, u[0] * f, u[1] * f, u[0], u[1]]);
        })?,
    }
    .values;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergentIntegral("tilted moments are not finite".into()));
    }
    Ok((vals[1] / (vals[3] * vals[0]), vals[2] / (vals[4] * vals[0])))
}

/// `(a, b)` over a `grid × grid` lattice of `(λ, ξ)` in `[0, range]²`
/// (`range` defaults to `10n`).
pub fn feasibility_sweep(prior: &SweepPrior, n: f64, grid: usize, range: Option<f64>, eng: &ExpectationEngine) -> Result<SweepResult> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidInput(format!("n must be positive, got {n}")));
    }
    if grid < 2 {
        return Err(Error::InvalidInput("the grid needs at least two points per axis".into()));
    }
    if let SweepPrior::Density(d) = prior {
        if d.dim() != 2 {
            return Err(Error::InvalidInput("the sweep needs a bivariate prior".into()));
        }
    }
    let top = range.unwrap_or(10.0 * n);
    let step = top / (grid - 1) as f64;
    let integer = (n - n.round()).abs() < 1e-12 && n.round() <= 64.0;
    let rows: Vec<(Vec<SweepPoint>, usize)> = (0..grid)
        .into_par_iter()
        .map(|i| {
            let lambda = i as f64 * step;
            let mut pts = Vec::with_capacity(grid);
            let mut skipped = 0;
            for j in 0..grid {
                let xi = j as f64 * step;
                let r = match (integer, multinomial_ratios(prior, n.round() as u32, lambda, xi)) {
                    (true, Some(r)) => Ok(r),
                    _ => engine_ratios(prior, n, lambda, xi, eng),
                };
                match r {
                    Ok((a, b)) if a.is_finite() && b.is_finite() => pts.push(SweepPoint { lambda, xi, a, b }),
                    _ => skipped += 1,
                }
            }
            (pts, skipped)
        })
        .collect();
    let skipped = rows.iter().map(|r| r.1).sum();
    Ok(SweepResult { points: rows.into_iter().flat_map(|r| r.0).collect(), skipped })
}
