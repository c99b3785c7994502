//! Moment views `∫ g_i dν (= or ≥) c_i`.

use crate::error::{Error, Result};
use crate::payoff::Payoff;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Equality,
    Geq,
}

/// Moment constraints with inequality views listed first.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    g: Vec<Payoff>,
    c: Vec<f64>,
    sense: Vec<Sense>,
    weights: Vec<f64>,
}

impl ConstraintSet {
    /// Validate a constraint list. Inequalities must precede equalities and
    /// weights (uniform when omitted) must be positive and sum to one.
    pub fn new(g: Vec<Payoff>, c: Vec<f64>, sense: Vec<Sense>, weights: Option<Vec<f64>>) -> Result<Self> {
        let k = g.len();
        if c.len() != k || sense.len() != k {
            return Err(Error::InvalidInput(format!(
                "constraint lengths differ: {} functions, {} targets, {} senses",
                k,
                c.len(),
                sense.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("constraint targets must be finite".into()));
        }
        if sense.windows(2).any(|w| w[0] == Sense::Equality && w[1] == Sense::Geq) {
            return Err(Error::InvalidInput("inequality constraints must be listed first".into()));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != k {
                    return Err(Error::InvalidInput("one weight per constraint is required".into()));
                }
                if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidInput("constraint weights must be positive".into()));
                }
                let s: f64 = w.iter().sum();
                if k > 0 && (s - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("constraint weights sum to {s}, expected 1")));
                }
                w
            }
            None => vec![1.0 / k.max(1) as f64; k],
        };
        Ok(Self { g, c, sense, weights })
    }

    /// All-equality constraint set with uniform weights.
    pub fn equalities(g: Vec<Payoff>, c: Vec<f64>) -> Result<Self> {
        let k = g.len();
        Self::new(g, c, vec![Sense::Equality; k], None)
    }

    pub fn empty() -> Self {
        Self { g: vec![], c: vec![], sense: vec![], weights: vec![] }
    }

    pub fn k(&self) -> usize {
        self.g.len()
    }

    pub fn k1(&self) -> usize {
        self.sense.iter().filter(|s| **s == Sense::Geq).count()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn g(&self) -> &[Payoff] {
        &self.g
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn sense(&self) -> &[Sense] {
        &self.sense
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.g) {
            *o = g.eval(x);
        }
    }

    pub fn breakpoints(&self) -> Vec<(usize, f64)> {
        self.g.iter().flat_map(|g| g.breakpoints()).collect()
    }

    /// Equality-only set built from the chosen indices, with renormalised weights.
    pub fn restricted(&self, idx: &[usize]) -> Self {
        let s: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        Self {
            g: idx.iter().map(|&i| self.g[i].clone()).collect(),
            c: idx.iter().map(|&i| self.c[i]).collect(),
            sense: vec![Sense::Equality; idx.len()],
            weights: idx.iter().map(|&i| self.weights[i] / s).collect(),
        }
    }

    /// Same functions with new targets.
    pub fn with_targets(&self, c: Vec<f64>) -> Result<Self> {
        Self::new(self.g.clone(), c, self.sense.clone(), Some(self.weights.clone()))
    }
}
