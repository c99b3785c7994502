//! Fitting a Black-Scholes prior to observed European call prices.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::constraints::ConstraintSet;
use crate::dist::{Density, ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;
use crate::tilt::{solve_polynomial, Status, TiltedPosterior};
use crate::wls::solve_perturbed;

/// Black-Scholes price of a European call.
pub fn black_scholes_call(s0: f64, strike: f64, r: f64, sigma: f64, maturity: f64) -> f64 {
    let n = Normal::standard();
    let st = sigma * maturity.sqrt();
    let d1 = ((s0 / strike).ln() + (r + 0.5 * sigma * sigma) * maturity) / st;
    let d2 = d1 - st;
    s0 * n.cdf(d1) - strike * (-r * maturity).exp() * n.cdf(d2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketModel {
    pub s0: f64,
    pub r: f64,
    pub sigma: f64,
    pub maturity: f64,
}

impl MarketModel {
    pub fn new(s0: f64, r: f64, sigma: f64, maturity: f64) -> Result<Self> {
        if !(s0 > 0.0 && sigma > 0.0 && maturity > 0.0 && r.is_finite()) {
            return Err(Error::InvalidInput("spot, volatility and maturity must be positive".into()));
        }
        Ok(Self { s0, r, sigma, maturity })
    }

    /// Terminal price law: lognormal(log S₀ + (r − σ²/2)T, σ²T).
    pub fn prior(&self) -> Result<Density> {
        let v = self.sigma * self.sigma * self.maturity;
        Density::lognormal(self.s0.ln() + (self.r - 0.5 * self.sigma * self.sigma) * self.maturity, v)
    }

    pub fn discount(&self) -> f64 {
        (-self.r * self.maturity).exp()
    }

    pub fn bs_price(&self, strike: f64) -> f64 {
        black_scholes_call(self.s0, strike, self.r, self.sigma, self.maturity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionQuote {
    pub strike: f64,
    pub price: f64,
}

/// Views `E[(S_T − K)^+] = price · e^{rT}` on undiscounted payoffs, so the
/// multipliers act on `(x − K)^+` directly.
pub fn call_views(model: &MarketModel, quotes: &[OptionQuote], weights: Option<Vec<f64>>) -> Result<ConstraintSet> {
    let d = model.discount();
    let g = quotes.iter().map(|q| Payoff::call(q.strike, 1.0)).collect();
    let c = quotes.iter().map(|q| q.price / d).collect();
    let k = quotes.len();
    ConstraintSet::new(g, c, vec![crate::constraints::Sense::Equality; k], weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMethod {
    /// Exact fit under the polynomial divergence.
    Exact { beta: f64 },
    /// Penalised fit with per-quote penalties `t·w_i`.
    Perturbed { beta: f64 },
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub posterior: TiltedPosterior,
    pub status: Status,
    /// `|model price − quote|` per quote.
    pub residuals: Vec<f64>,
    pub divergence: f64,
}

/// Calibrate to `quotes`. For the penalised method `tw` gives `t·w_i` per
/// quote; `t = Σ tw_i` and `w_i = tw_i / t`.
pub fn calibrate(
    model: &MarketModel,
    quotes: &[OptionQuote],
    method: CalibrationMethod,
    tw: Option<&[f64]>,
    eng: &ExpectationEngine,
) -> Result<Calibration> {
    let prior = Prior::Density(model.prior()?);
    let (posterior, beta, status, divergence) = match method {
        CalibrationMethod::Exact { beta } => {
            let cs = call_views(model, quotes, None)?;
            let (post, rep) = solve_polynomial(&prior, &cs, beta, eng)?;
            let div = post.polynomial_divergence(beta, eng)?.value;
            (post, beta, rep.status, div)
        }
        CalibrationMethod::Perturbed { beta } => {
            let tw = tw.ok_or_else(|| Error::InvalidInput("penalised calibration needs per-quote penalties".into()))?;
            if tw.len() != quotes.len() || tw.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidInput("one positive penalty per quote is required".into()));
            }
            let t: f64 = tw.iter().sum();
            let w: Vec<f64> = tw.iter().map(|v| v / t).collect();
            let cs = call_views(model, quotes, Some(w))?;
            let sol = solve_perturbed(&prior, &cs, beta, t, eng)?;
            let status = if sol.lambda_capped { Status::NotStronglyFeasible } else { Status::Converged };
            (sol.posterior, beta, status, sol.divergence)
        }
    };
    let strikes: Vec<f64> = quotes.iter().map(|q| q.strike).collect();
    let fitted = price_calls(&posterior, &strikes, model.discount(), eng)?;
    let residuals = fitted.iter().zip(quotes).map(|(p, q)| (p - q.price).abs()).collect();
    Ok(Calibration { lambda: posterior.lambda().to_vec(), beta, posterior, status, residuals, divergence })
}

/// Discounted call prices `D · E_ν[(S_T − K)^+]`.
pub fn price_calls(post: &TiltedPosterior, strikes: &[f64], discount: f64, eng: &ExpectationEngine) -> Result<Vec<f64>> {
    let g: Vec<Payoff> = strikes.iter().map(|k| Payoff::call(*k, discount)).collect();
    post.moments_of(&g, eng)
}
