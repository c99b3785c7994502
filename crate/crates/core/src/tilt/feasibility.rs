//! Verification of `a0 + Σ a_i g_i(x) ≥ 0` almost surely under the prior.

use crate::dist::Prior;
use crate::payoff::Payoff;

const PROBE_COUNT: usize = 100_000;
const PROBE_SEED: u64 = 0x0f3a_51b1;
const SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    /// All `g_i` piecewise linear in one coordinate: kinks, midpoints and end slopes.
    Exact,
    /// All `g_i ≥ 0`: nonnegative coefficients suffice, otherwise probe points.
    Nonneg,
    /// Probe points only (cloud atoms, a 10⁵-point sample or a grid).
    Sampled,
}

/// Precomputed evaluation of the view functions at the check points.
#[derive(Debug, Clone)]
pub struct FeasibilityChecker {
    k: usize,
    mode: CheckMode,
    values: Vec<f64>,
    /// Pairs `(p, q)` of check points with the requirement `h(q) ≥ h(p)`.
    slopes: Vec<(usize, usize)>,
}

impl FeasibilityChecker {
    pub fn new(prior: &Prior, g: &[Payoff]) -> Self {
        let k = g.len();
        let support = prior.support();
        if let Prior::Cloud(c) = prior {
            return Self::from_points(k, CheckMode::Sampled, g, c.points(), vec![]);
        }
        let coords: Vec<Option<usize>> = g.iter().map(|p| p.piecewise_linear_coord()).collect();
        if k > 0 && coords.iter().all(|c| c.is_some() && *c == coords[0]) {
            let j = coords[0].unwrap();
            if j < support.len() {
                let (pts, slopes) = kink_points(g, j, support[j], support.len());
                return Self::from_points(k, CheckMode::Exact, g, &pts, slopes);
            }
        }
        let mode = if g.iter().all(|p| p.is_nonneg_on(&support)) { CheckMode::Nonneg } else { CheckMode::Sampled };
        let probes = prior.probe_points(PROBE_COUNT, PROBE_SEED);
        Self::from_points(k, mode, g, &probes, vec![])
    }

    fn from_points(k: usize, mode: CheckMode, g: &[Payoff], pts: &[Vec<f64>], slopes: Vec<(usize, usize)>) -> Self {
        let mut values = Vec::with_capacity(pts.len() * k);
        for p in pts {
            values.extend(g.iter().map(|f| f.eval(p)));
        }
        Self { k, mode, values, slopes }
    }

    pub fn mode(&self) -> CheckMode {
        self.mode
    }

    fn h(&self, row: usize, a0: f64, a: &[f64]) -> f64 {
        let v = &self.values[row * self.k..(row + 1) * self.k];
        a0 + v.iter().zip(a).map(|(x, y)| x * y).sum::<f64>()
    }

    /// Whether `a0 + Σ a_i g_i ≥ 0` holds on the support, within 1e-12.
    pub fn affine_nonneg(&self, a0: f64, a: &[f64]) -> bool {
        if a0.is_nan() || a.iter().any(|v| !v.is_finite()) {
            return false;
        }
        if self.mode == CheckMode::Nonneg && a0 >= 0.0 && a.iter().all(|v| *v >= 0.0) {
            return true;
        }
        let tol = SLACK * a0.abs().max(1.0);
        let rows = if self.k == 0 { 0 } else { self.values.len() / self.k };
        if self.k == 0 {
            return a0 >= -tol;
        }
        for r in 0..rows {
            if self.h(r, a0, a) < -tol {
                return false;
            }
        }
        self.slopes.iter().all(|&(p, q)| self.h(q, a0, a) - self.h(p, a0, a) >= -tol)
    }
}

fn kink_points(g: &[Payoff], j: usize, (lo, hi): (f64, f64), dim: usize) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
    let mut knots: Vec<f64> = g
        .iter()
        .flat_map(|p| p.breakpoints())
        .filter(|(c, v)| *c == j && *v > lo && *v < hi)
        .map(|(_, v)| v)
        .collect();
    if lo.is_finite() {
        knots.push(lo);
    }
    if hi.is_finite() {
        knots.push(hi);
    }
    if knots.is_empty() {
        knots.push(0.0f64.clamp(lo, hi));
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup();

    let mut xs = Vec::new();
    for (i, &b) in knots.iter().enumerate() {
        let d = 1e-9 * b.abs().max(1.0);
        xs.push(b);
        if b - d >= lo {
            xs.push(b - d);
        }
        if b + d <= hi {
            xs.push(b + d);
        }
        if let Some(&nb) = knots.get(i + 1) {
            xs.push(0.5 * (b + nb));
        }
    }
    let mut slopes = Vec::new();
    let first = knots[0];
    let last = *knots.last().unwrap();
    if hi.is_infinite() {
        let p = xs.len();
        xs.push(last + 1.0);
        xs.push(last + 1.0 + last.abs().max(1.0));
        slopes.push((p, p + 1));
    }
    if lo.is_infinite() {
        let p = xs.len();
        xs.push(first - 1.0);
        xs.push(first - 1.0 - first.abs().max(1.0));
        slopes.push((p, p + 1));
    }
    let pts = xs
        .into_iter()
        .map(|v| {
            let mut p = vec![0.0; dim];
            p[j] = v;
            p
        })
        .collect();
    (pts, slopes)
}
