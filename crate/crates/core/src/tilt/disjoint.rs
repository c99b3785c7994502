//! Views on the probabilities of a partition `B_1, …, B_k` of the support.

use std::sync::Arc;

use super::TiltedPosterior;
use crate::dist::{ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;

/// A partition of the support given by a block-index function.
#[derive(Clone)]
pub struct Partition {
    blocks: Vec<Payoff>,
}

impl std::fmt::Debug for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Partition").field("blocks", &self.blocks.len()).finish()
    }
}

impl Partition {
    /// Blocks `{x : membership(x) = i}` for `i < k`; `breaks` lists block
    /// boundaries for quadrature.
    pub fn new(
        k: usize,
        membership: impl Fn(&[f64]) -> usize + Send + Sync + 'static,
        breaks: Vec<(usize, f64)>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("a partition needs at least one block".into()));
        }
        let f = Arc::new(membership);
        let blocks = (0..k)
            .map(|i| {
                let f = f.clone();
                Payoff::Custom {
                    f: Arc::new(move |x: &[f64]| if f(x) == i { 1.0 } else { 0.0 }),
                    lower_bound: 0.0,
                    breaks: breaks.clone(),
                }
            })
            .collect();
        Ok(Self { blocks })
    }

    /// Intervals `(−∞, c_1), [c_1, c_2), …, [c_m, ∞)` of the first coordinate.
    pub fn intervals(cuts: &[f64]) -> Result<Self> {
        if cuts.windows(2).any(|w| !(w[0] < w[1])) || cuts.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("cut points must be finite and increasing".into()));
        }
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend_from_slice(cuts);
        edges.push(f64::INFINITY);
        Ok(Self { blocks: edges.windows(2).map(|w| Payoff::indicator(w[0], w[1])).collect() })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block indicators, usable as probability views.
    pub fn indicators(&self) -> &[Payoff] {
        &self.blocks
    }
}

/// `ν(A) = Σ_i α_i μ(A ∩ B_i)/μ(B_i)`: the minimiser for I-divergence and
/// every polynomial divergence alike. Returned in polynomial form with `β = 1`
/// and `λ_i = α_i/μ(B_i) − 1`.
pub fn disjoint_set_update(prior: &Prior, sets: &Partition, alphas: &[f64], eng: &ExpectationEngine) -> Result<TiltedPosterior> {
    let k = sets.len();
    if alphas.len() != k {
        return Err(Error::InvalidInput(format!("{} probabilities for {k} blocks", alphas.len())));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::InvalidInput("block probabilities must be nonnegative".into()));
    }
    let s: f64 = alphas.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("block probabilities sum to {s}, expected 1")));
    }
    let base = prior.materialize(eng)?;
    let g = sets.indicators();
    let breaks: Vec<_> = g.iter().flat_map(|p| p.breakpoints()).collect();
    let mu = base
        .expect_vec(eng, k, &breaks, &|x, o| {
            for (v, p) in o.iter_mut().zip(g) {
                *v = p.eval(x);
            }
        })?
        .values;
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("blocks cover prior mass {total}, not a partition of the support")));
    }
    let mut lambda = Vec::with_capacity(k);
    for i in 0..k {
        if mu[i] <= 0.0 {
            if alphas[i] > 0.0 {
                return Err(Error::InvalidInput(format!("block {i} has zero prior mass but probability {}", alphas[i])));
            }
            lambda.push(-1.0);
        } else {
            lambda.push(alphas[i] / mu[i] - 1.0);
        }
    }
    Ok(TiltedPosterior::poly_parts(base, g.to_vec(), lambda.clone(), 1.0, 1.0, lambda, 1.0))
}
