//! Posteriors whose `X`-marginal is prescribed as `g` and which satisfy
//! moment views `E[h_i(X, Y)] = c_i`.
//!
//! Integrals are nested: an outer rule over `x` weighted by `g`, and per-node
//! rules for the prior conditional `f(y | x)`. Under the I-divergence the
//! conditional is tilted by `e^{λ·h}`; under the polynomial divergence the
//! density ratio is `(ζ(x) + βλ·h)_+^{1/β}` with `ζ(x)` fixed by the marginal.

mod change;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dist::{Density, ExpectationEngine, Method, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;
use crate::quadrature::{gauss_hermite, integrate, kronrod_rule, segments, QuadSettings, Segment};
use crate::roots::brent;
use crate::tilt::newton::{minimize, solve_system, Local};
use crate::tilt::{SolveReport, SolverOptions, Status};

pub use change::{lift_views, ChangeOfVariables, Pullback};

/// Outer sample size when `X` has more than one dimension.
const OUTER_SAMPLES: usize = 20_000;

/// Prescribed marginal for `X` plus moment views on `(x, y)`.
#[derive(Debug, Clone)]
pub struct MarginalView {
    pub g_marginal: Prior,
    /// Functions of the concatenated point `(x, y)`.
    pub h: Vec<Payoff>,
    pub c: Vec<f64>,
    pub beta: Option<f64>,
}

impl MarginalView {
    pub fn new(g_marginal: impl Into<Prior>, h: Vec<Payoff>, c: Vec<f64>, beta: Option<f64>) -> Result<Self> {
        if h.len() != c.len() {
            return Err(Error::InvalidInput(format!("{} view functions but {} targets", h.len(), c.len())));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("targets must be finite".into()));
        }
        if let Some(b) = beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidInput(format!("beta must be positive, got {b}")));
            }
        }
        Ok(Self { g_marginal: g_marginal.into(), h, c, beta })
    }

    pub fn k(&self) -> usize {
        self.h.len()
    }

    pub fn dim_x(&self) -> usize {
        self.g_marginal.dim()
    }
}

/// One outer node: `x`, its `g`-weight, `log(g/f_X)` at `x` and a
/// normalised rule for `f(y | x)` with the view functions evaluated.
#[derive(Debug, Clone)]
struct Node {
    x: Vec<f64>,
    weight: f64,
    log_ratio: f64,
    ys: Vec<Vec<f64>>,
    yw: Vec<f64>,
    hv: Vec<Vec<f64>>,
}

enum Inner {
    Gaussian { mu_x: DVector<f64>, mu_y: DVector<f64>, slope: DMatrix<f64>, factor: DMatrix<f64>, xx_inv: DMatrix<f64>, log_norm: f64, z: Vec<(Vec<f64>, f64)> },
    Adaptive { density: Density },
    Atoms { points: Vec<Vec<f64>>, masses: Vec<f64> },
}

struct Builder<'a> {
    prior: &'a Prior,
    view: &'a MarginalView,
    p: usize,
    inner: Inner,
    eng: &'a ExpectationEngine,
}

fn gh_order(q: usize) -> Option<usize> {
    match q {
        1 => Some(48),
        2 => Some(24),
        3 => Some(12),
        4 => Some(8),
        _ => None,
    }
}

impl<'a> Builder<'a> {
    fn new(prior: &'a Prior, view: &'a MarginalView, eng: &'a ExpectationEngine) -> Result<Self> {
        let p = view.dim_x();
        let n = prior.dim();
        if p == 0 || p >= n {
            return Err(Error::InvalidInput(format!("marginal has dimension {p} but the prior has {n}")));
        }
        let q = n - p;
        let inner = match prior {
            Prior::Cloud(c) => {
                if !matches!(view.g_marginal, Prior::Cloud(_)) {
                    return Err(Error::NotAbsolutelyContinuous);
                }
                Inner::Atoms { points: c.points().to_vec(), masses: c.weights().to_vec() }
            }
            Prior::Density(d) => {
                if let Prior::Cloud(_) = view.g_marginal {
                    return Err(Error::InvalidInput("a sampled marginal needs a sampled prior".into()));
                }
                match d.gaussian_params() {
                    Some((mean, cov)) => {
                        let sxx = cov.view((0, 0), (p, p)).into_owned();
                        let sxy = cov.view((0, p), (p, q)).into_owned();
                        let syy = cov.view((p, p), (q, q)).into_owned();
                        let inv = sxx
                            .clone()
                            .cholesky()
                            .map(|c| c.inverse())
                            .ok_or_else(|| Error::SingularBlock("Σ_xx is not invertible".into()))?;
                        let log_norm = -0.5 * ((2.0 * std::f64::consts::PI).powi(p as i32) * sxx.determinant()).ln();
                        let slope = sxy.transpose() * &inv;
                        let cond = &syy - &slope * &sxy;
                        let cond = 0.5 * (&cond + cond.transpose());
                        let factor = Density::gaussian_nd(DVector::zeros(q), cond)?.gaussian_factor().cloned().expect("factor");
                        let ord = gh_order(q).ok_or_else(|| Error::InvalidInput(format!("Y has {q} dimensions; at most 4 are supported")))?;
                        let gh = gauss_hermite(ord);
                        let mut z = vec![(vec![], 1.0)];
                        for _ in 0..q {
                            z = z
                                .into_iter()
                                .flat_map(|(v, w)| {
                                    gh.0.iter().zip(&gh.1).map(move |(a, b)| {
                                        let mut v2 = v.clone();
                                        v2.push(*a);
                                        (v2, w * b)
                                    })
                                })
                                .collect();
                        }
                        Inner::Gaussian {
                            mu_x: mean.rows(0, p).into_owned(),
                            mu_y: mean.rows(p, q).into_owned(),
                            slope,
                            factor,
                            xx_inv: inv,
                            log_norm,
                            z,
                        }
                    }
                    None => {
                        if q != 1 {
                            return Err(Error::InvalidInput("non-Gaussian priors need a one-dimensional Y".into()));
                        }
                        Inner::Adaptive { density: d.clone() }
                    }
                }
            }
        };
        Ok(Self { prior, view, p, inner, eng })
    }

    /// Conditional rule at `x`: nodes, normalised weights and `log f_X(x)`.
    fn conditional(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
        match &self.inner {
            Inner::Gaussian { mu_x, mu_y, slope, factor, xx_inv, log_norm, z } => {
                let d = DVector::from_column_slice(x) - mu_x;
                let m = mu_y + slope * &d;
                let mut ys = Vec::with_capacity(z.len());
                let mut ws = Vec::with_capacity(z.len());
                for (zz, w) in z {
                    let y = &m + factor * DVector::from_column_slice(zz);
                    ys.push(y.iter().copied().collect());
                    ws.push(*w);
                }
                Ok((ys, ws, log_norm - 0.5 * d.dot(&(xx_inv * &d))))
            }
            Inner::Atoms { points, masses } => {
                let mut ys = vec![];
                let mut ws = vec![];
                for (pt, m) in points.iter().zip(masses) {
                    if pt[..self.p] == *x && *m > 0.0 {
                        ys.push(pt[self.p..].to_vec());
                        ws.push(*m);
                    }
                }
                let total: f64 = ws.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::NotAbsolutelyContinuous);
                }
                ws.iter_mut().for_each(|w| *w /= total);
                Ok((ys, ws, total.ln()))
            }
            Inner::Adaptive { density } => {
                let (lo, hi) = density.support()[self.p];
                let mut pt = x.to_vec();
                pt.push(0.0);
                let pdf = |y: f64| {
                    let mut pt = pt.clone();
                    pt[self.p] = y;
                    density.pdf(&pt)
                };
                let (ys, ws, total) = self.rule_1d(x, &pdf, (lo, hi), &[], (0.0, 1.0), None)?;
                Ok((ys, ws, total.ln()))
            }
        }
    }

    /// Adaptive rule for a one-dimensional `Y` against the unnormalised `pdf`,
    /// split at `cuts` and the views' breakpoints, resolving `pdf·(1, h, extra)`.
    /// Returns nodes, normalised weights and the total mass.
    #[allow(clippy::type_complexity)]
    fn rule_1d(
        &self,
        x: &[f64],
        pdf: &(dyn Fn(f64) -> f64 + Sync),
        support: (f64, f64),
        cuts: &[f64],
        shape: (f64, f64),
        extra: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
        let mut breaks: Vec<f64> = self.view.h.iter().flat_map(|h| h.breakpoints()).filter(|b| b.0 == self.p).map(|b| b.1).collect();
        breaks.extend_from_slice(cuts);
        let segs = segments(support.0, support.1, &breaks, shape.0, shape.1);
        let k = self.view.k();
        let m = 1 + k + usize::from(extra.is_some());
        let mut pt = x.to_vec();
        pt.push(0.0);
        let cfg = QuadSettings { abs_tol: 1e-300, rel_tol: 1e-10, max_intervals: 400 };
        let r = integrate(
            |y, o| {
                let mut pt = pt.clone();
                pt[self.p] = y;
                let f = pdf(y);
                o[0] = f;
                for i in 0..k {
                    o[1 + i] = f * self.view.h[i].eval(&pt);
                }
                if let Some(e) = extra {
                    o[1 + k] = f * e(&pt);
                }
            },
            &segs,
            m,
            &cfg,
        )?;
        let rule = kronrod_rule(&segs, &r.partition);
        let mut ys = Vec::with_capacity(rule.len());
        let mut ws = Vec::with_capacity(rule.len());
        for (y, w) in rule {
            let f = pdf(y);
            if f > 0.0 && w > 0.0 {
                ys.push(vec![y]);
                ws.push(w * f);
            }
        }
        let total: f64 = ws.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::NotAbsolutelyContinuous);
        }
        ws.iter_mut().for_each(|w| *w /= total);
        Ok((ys, ws, total))
    }

    /// Rebuild a one-dimensional conditional rule split where the polynomial
    /// tilt `ζ' + εβλ·h` changes sign, repeating until the cuts settle.
    fn split_at_kinks(&self, mut nd: Node, lambda: &[f64], beta: f64) -> Result<Node> {
        if nd.ys.first().is_none_or(|y| y.len() != 1) || lambda.iter().all(|l| *l == 0.0) {
            return Ok(nd);
        }
        let (pdf, support, shape): (Box<dyn Fn(f64) -> f64 + Sync>, (f64, f64), (f64, f64)) = match &self.inner {
            Inner::Atoms { .. } => return Ok(nd),
            Inner::Gaussian { mu_x, mu_y, slope, factor, .. } => {
                let m = mu_y[0] + (slope * (DVector::from_column_slice(&nd.x) - mu_x))[0];
                let sd = factor[(0, 0)];
                (Box::new(move |y: f64| (-0.5 * ((y - m) / sd).powi(2)).exp()), (f64::NEG_INFINITY, f64::INFINITY), (m, sd))
            }
            Inner::Adaptive { density } => {
                let mut pt = nd.x.clone();
                pt.push(0.0);
                let p = self.p;
                let d = density.clone();
                (
                    Box::new(move |y: f64| {
                        let mut pt = pt.clone();
                        pt[p] = y;
                        d.pdf(&pt)
                    }),
                    density.support()[self.p],
                    (0.0, 1.0),
                )
            }
        };
        let eb = node_eps(&nd, beta) * beta;
        let x = nd.x.clone();
        let h = &self.view.h;
        let u_at = |zeta: f64, y: f64| {
            let pt: Vec<f64> = x.iter().copied().chain([y]).collect();
            zeta + eb * h.iter().zip(lambda).map(|(f, l)| l * f.eval(&pt)).sum::<f64>()
        };
        let mut prev: Vec<f64> = vec![];
        for _ in 0..8 {
            let zeta = poly_zeta(&nd, lambda, beta)?;
            let mut order: Vec<usize> = (0..nd.ys.len()).collect();
            order.sort_by(|a, b| nd.ys[*a][0].total_cmp(&nd.ys[*b][0]));
            let mut cuts = vec![];
            for w in order.windows(2) {
                let (a, b) = (nd.ys[w[0]][0], nd.ys[w[1]][0]);
                let (ua, ub) = (u_at(zeta, a), u_at(zeta, b));
                if (ua > 0.0) != (ub > 0.0) && a < b {
                    let span = b - a;
                    cuts.push(brent(|y| u_at(zeta, y), a, b, 1e-15 * (1.0 + a.abs().max(b.abs())).max(span * 1e-12), 200)?);
                }
            }
            if cuts.is_empty() {
                return Ok(nd);
            }
            let settled = cuts.len() == prev.len() && cuts.iter().zip(&prev).all(|(a, b)| (a - b).abs() <= 1e-13 * (1.0 + a.abs()));
            if settled {
                break;
            }
            let extra = |pt: &[f64]| {
                let u = zeta + eb * h.iter().zip(lambda).map(|(f, l)| l * f.eval(pt)).sum::<f64>();
                pos_pow(u, 1.0 / beta)
            };
            let (ys, yw, _) = self.rule_1d(&x, &*pdf, support, &cuts, shape, Some(&extra))?;
            nd.hv = ys.iter().map(|y| {
                let pt: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
                h.iter().map(|f| f.eval(&pt)).collect()
            }).collect();
            nd.ys = ys;
            nd.yw = yw;
            prev = cuts;
        }
        Ok(nd)
    }

    fn node(&self, x: Vec<f64>, weight: f64, gx: f64) -> Result<Option<Node>> {
        if !(weight > 0.0) || !(gx > 0.0) {
            return Ok(None);
        }
        let (ys, yw, lfx) = self.conditional(&x)?;
        if !lfx.is_finite() {
            return Err(Error::NotAbsolutelyContinuous);
        }
        let hv = ys
            .iter()
            .map(|y| {
                let pt: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
                self.view.h.iter().map(|h| h.eval(&pt)).collect()
            })
            .collect();
        Ok(Some(Node { log_ratio: gx.ln() - lfx, x, weight, ys, yw, hv }))
    }

    fn outer_segments(&self, g: &Density) -> Vec<Segment> {
        let (lo, hi) = g.support()[0];
        let (c, s, mut pts) = g.hints_1d();
        pts.extend(self.view.h.iter().flat_map(|h| h.breakpoints()).filter(|b| b.0 == 0).map(|b| b.1));
        segments(lo, hi, &pts, c, s)
    }

    /// Outer nodes. With `refine`, the 1-D partition adapts to `g(x)·refine(x)`.
    fn nodes(&self, refine: Option<&(dyn Fn(&Node) -> Vec<f64> + Sync)>) -> Result<Vec<Node>> {
        match &self.view.g_marginal {
            Prior::Cloud(gc) => {
                let items: Vec<(Vec<f64>, f64)> = gc.points().iter().cloned().zip(gc.weights().iter().copied()).collect();
                // merge repeated atoms so each x carries its total mass
                let mut merged: Vec<(Vec<f64>, f64)> = Vec::new();
                for (x, w) in items {
                    match merged.iter_mut().find(|(y, _)| *y == x) {
                        Some(e) => e.1 += w,
                        None => merged.push((x, w)),
                    }
                }
                merged.into_iter().filter_map(|(x, w)| self.node(x, w, w).transpose()).collect()
            }
            Prior::Density(g) => {
                if self.p > 1 || matches!(self.eng.resolve(1), Method::MonteCarlo { .. }) {
                    let seed = match self.eng.method {
                        Method::MonteCarlo { seed, .. } => seed,
                        _ => 0x6d61_7267,
                    };
                    let cloud = g.sample(OUTER_SAMPLES, seed)?;
                    let w = 1.0 / cloud.len() as f64;
                    return cloud.points().par_iter().filter_map(|x| self.node(x.clone(), w, g.pdf(x)).transpose()).collect();
                }
                let segs = self.outer_segments(g);
                let m = 2 + self.view.k();
                let cfg = QuadSettings { abs_tol: 1e-300, rel_tol: 1e-10, max_intervals: 300 };
                let err = std::cell::RefCell::new(None);
                let r = integrate(
                    |x, o| {
                        o.iter_mut().for_each(|v| *v = 0.0);
                        let gx = g.pdf(&[x]);
                        if !(gx > 0.0) {
                            return;
                        }
                        o[0] = gx;
                        o[1] = gx * x;
                        if let Some(f) = refine {
                            match self.node(vec![x], 1.0, gx) {
                                Ok(Some(nd)) => {
                                    for (slot, v) in o[2..].iter_mut().zip(f(&nd)) {
                                        *slot = gx * v;
                                    }
                                }
                                Ok(None) => {}
                                Err(e) => *err.borrow_mut() = Some(e),
                            }
                        }
                    },
                    &segs,
                    m,
                    &cfg,
                )?;
                if let Some(e) = err.into_inner() {
                    return Err(e);
                }
                let rule = kronrod_rule(&segs, &r.partition);
                rule.par_iter()
                    .filter_map(|&(x, w)| {
                        let gx = g.pdf(&[x]);
                        self.node(vec![x], w * gx, gx).transpose()
                    })
                    .collect()
            }
        }
    }

    fn is_exact_outer(&self) -> bool {
        matches!(&self.view.g_marginal, Prior::Density(_)) && self.p == 1 && !matches!(self.eng.resolve(1), Method::MonteCarlo { .. })
    }

    fn prior(&self) -> &Prior {
        self.prior
    }
}

/// Solved marginal-constrained posterior.
#[derive(Debug, Clone)]
pub struct ConditionalTilt {
    prior: Prior,
    view: MarginalView,
    lambda: Vec<f64>,
    nodes: Vec<Node>,
    /// Per node: `log Z(x)` (exponential) or the scaled `ζ'(x)` (polynomial).
    scale: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(log Z, E[h], E[hhᵀ])` of the conditional rule tilted by `e^{λ·h}`.
fn exp_node(nd: &Node, lambda: &[f64], second: bool) -> (f64, Vec<f64>, Option<DMatrix<f64>>) {
    let k = lambda.len();
    let shift = nd.hv.iter().map(|h| dot(lambda, h)).fold(f64::MIN, f64::max);
    let mut z = 0.0;
    let mut m = vec![0.0; k];
    let mut s = if second { Some(DMatrix::zeros(k, k)) } else { None };
    for (h, w) in nd.hv.iter().zip(&nd.yw) {
        let e = w * (dot(lambda, h) - shift).exp();
        z += e;
        for i in 0..k {
            m[i] += e * h[i];
        }
        if let Some(s) = s.as_mut() {
            for i in 0..k {
                for j in 0..k {
                    s[(i, j)] += e * h[i] * h[j];
                }
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= z);
    if let Some(s) = s.as_mut() {
        *s /= z;
    }
    (z.ln() + shift, m, s)
}

fn poly_u(zeta: f64, eps_beta: f64, lambda: &[f64], h: &[f64]) -> f64 {
    zeta + eps_beta * dot(lambda, h)
}

fn pos_pow(u: f64, inv: f64) -> f64 {
    if u > 0.0 {
        u.powf(inv)
    } else {
        0.0
    }
}

/// `ε = (g/f_X)^{-β}` at the node. The density ratio is `r·(ζ' + εβλ·h)_+^{1/β}`
/// with `ζ = r^β ζ'`, which keeps nodes with overflowing `r` representable.
fn node_eps(nd: &Node, beta: f64) -> f64 {
    (-beta * nd.log_ratio).exp()
}

/// Scaled normaliser `ζ'` with `Σ w (ζ' + εβλ·h)_+^{1/β} = 1`.
fn poly_zeta(nd: &Node, lambda: &[f64], beta: f64) -> Result<f64> {
    let inv = 1.0 / beta;
    let eps = node_eps(nd, beta);
    let s: Vec<f64> = nd.hv.iter().map(|h| eps * beta * dot(lambda, h)).collect();
    let mass = |z: f64| -> f64 { s.iter().zip(&nd.yw).map(|(a, w)| w * pos_pow(z + a, inv)).sum::<f64>() - 1.0 };
    let lo = -s.iter().copied().fold(f64::MIN, f64::max);
    let mut hi = -s.iter().copied().fold(f64::MAX, f64::min) + 2.0;
    let mut tries = 0;
    while mass(hi) < 0.0 {
        hi = lo + 2.0 * (hi - lo);
        tries += 1;
        if tries > 200 {
            return Err(Error::Infeasible("per-x normaliser could not be bracketed".into()));
        }
    }
    brent(mass, lo, hi, 1e-15 * hi.abs().max(1.0), 300)
}

/// Per-node polynomial terms: `ζ'`, `E[h]`, the symmetric sensitivity of
/// `E[h]` in `λ` (without the factor `β`), and whether the positive part was active.
fn poly_node(nd: &Node, lambda: &[f64], beta: f64) -> Result<(f64, Vec<f64>, DMatrix<f64>, bool)> {
    let k = lambda.len();
    let inv = 1.0 / beta;
    let zeta = poly_zeta(nd, lambda, beta)?;
    let eps = node_eps(nd, beta);
    let mut m = vec![0.0; k];
    let mut qs = 0.0;
    let mut qh = vec![0.0; k];
    let mut qhh = DMatrix::<f64>::zeros(k, k);
    let mut cut = false;
    for (h, w) in nd.hv.iter().zip(&nd.yw) {
        let u = poly_u(zeta, eps * beta, lambda, h);
        if u <= 0.0 {
            cut = true;
            continue;
        }
        let l = u.powf(inv);
        let q = w * l / u;
        qs += q;
        for i in 0..k {
            m[i] += w * l * h[i];
            qh[i] += q * h[i];
            for j in 0..k {
                qhh[(i, j)] += q * h[i] * h[j];
            }
        }
    }
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            jac[(i, j)] = eps * (qhh[(i, j)] - qh[i] * qh[j] / qs);
        }
    }
    Ok((zeta, m, jac, cut))
}

pub fn solve_marginal_i(prior: &Prior, view: &MarginalView, eng: &ExpectationEngine) -> Result<(ConditionalTilt, SolveReport)> {
    solve_marginal_i_with(prior, view, eng, &SolverOptions::default())
}

/// I-divergence solve: damped Newton on `∫ g(x) log Z_λ(x) dx − λ·c`.
pub fn solve_marginal_i_with(
    prior: &Prior,
    view: &MarginalView,
    eng: &ExpectationEngine,
    opts: &SolverOptions,
) -> Result<(ConditionalTilt, SolveReport)> {
    let b = Builder::new(prior, view, eng)?;
    let k = view.k();
    let tol = opts.tol.unwrap_or(1e-10);
    let scale: Vec<f64> = view.c.iter().map(|v| v.abs().max(1.0)).collect();
    let solve = |nodes: &[Node], x0: Vec<f64>| -> Result<(Vec<f64>, f64, usize, bool)> {
        if k == 0 {
            return Ok((vec![], 0.0, 0, true));
        }
        let out = minimize(DVector::from_vec(x0), tol, opts.max_iter, |lam| {
            let l = lam.as_slice();
            let parts: Vec<(f64, f64, Vec<f64>, DMatrix<f64>)> = nodes
                .par_iter()
                .map(|nd| {
                    let (lz, m, s) = exp_node(nd, l, true);
                    (nd.weight, lz, m, s.unwrap())
                })
                .collect();
            let mut value = -dot(l, &view.c);
            let mut grad = DVector::from_iterator(k, view.c.iter().map(|c| -c));
            let mut hess = DMatrix::zeros(k, k);
            for (w, lz, m, s) in parts {
                if !lz.is_finite() {
                    return Ok(None);
                }
                value += w * lz;
                for i in 0..k {
                    grad[i] += w * m[i];
                    for j in 0..k {
                        hess[(i, j)] += w * (s[(i, j)] - m[i] * m[j]);
                    }
                }
            }
            let resid = (0..k).map(|i| grad[i].abs() / scale[i]).fold(0.0, f64::max);
            Ok(Some(Local { value, grad, hess, resid }))
        })?;
        Ok((out.x.as_slice().to_vec(), out.local.value, out.iterations, out.converged))
    };
    let x0 = opts.initial.clone().filter(|v| v.len() == k).unwrap_or_else(|| vec![0.0; k]);
    let nodes = b.nodes(None)?;
    let (mut lambda, mut dual, mut iters, mut ok) = solve(&nodes, x0)?;
    let mut nodes = nodes;
    if b.is_exact_outer() && k > 0 {
        let l = lambda.clone();
        let refine = move |nd: &Node| exp_node(nd, &l, false).1;
        nodes = b.nodes(Some(&refine))?;
        let (l2, d2, i2, ok2) = solve(&nodes, lambda)?;
        lambda = l2;
        dual = d2;
        iters += i2;
        ok = ok2;
    }
    if !ok {
        return Err(Error::Infeasible("the marginal dual diverges: views are inconsistent with the prescribed marginal".into()));
    }
    let scale_n: Vec<f64> = nodes.iter().map(|nd| exp_node(nd, &lambda, false).0).collect();
    let post = ConditionalTilt { prior: b.prior().clone(), view: view.clone(), lambda, nodes, scale: scale_n };
    let m = post.moments();
    let residuals = m.iter().zip(&view.c).map(|(a, c)| (a - c).abs()).collect();
    Ok((post, SolveReport { residuals, dual_value: dual, iterations: iters, status: Status::Converged }))
}

pub fn solve_marginal_poly(prior: &Prior, view: &MarginalView, eng: &ExpectationEngine) -> Result<(ConditionalTilt, SolveReport)> {
    solve_marginal_poly_with(prior, view, eng, &SolverOptions::default())
}

/// Polynomial-divergence solve: Newton on `E_λ[h] = c`, with `ζ(x)` solved
/// per node so that the `X`-marginal is exact.
pub fn solve_marginal_poly_with(
    prior: &Prior,
    view: &MarginalView,
    eng: &ExpectationEngine,
    opts: &SolverOptions,
) -> Result<(ConditionalTilt, SolveReport)> {
    let beta = view.beta.ok_or_else(|| Error::InvalidInput("the polynomial divergence needs beta".into()))?;
    let b = Builder::new(prior, view, eng)?;
    let k = view.k();
    let tol = opts.tol.unwrap_or(1e-10);
    let scale: Vec<f64> = view.c.iter().map(|v| v.abs().max(1.0)).collect();
    let system = |nodes: &[Node], lam: &DVector<f64>| -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
        let l = lam.as_slice();
        let parts = nodes.par_iter().map(|nd| poly_node(nd, l, beta).map(|v| (nd.weight, v))).collect::<Result<Vec<_>>>();
        let parts = match parts {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut f = DVector::from_iterator(k, view.c.iter().map(|c| -c));
        let mut j = DMatrix::zeros(k, k);
        for (w, (_, m, jac, _)) in parts {
            for i in 0..k {
                f[i] += w * m[i];
            }
            j += jac * (w * beta);
        }
        for i in 0..k {
            f[i] /= scale[i];
            for c in 0..k {
                j[(i, c)] /= scale[i];
            }
        }
        Ok(Some((f, j)))
    };
    let solve = |nodes: &[Node], x0: Vec<f64>| -> Result<(Vec<f64>, usize, bool)> {
        if k == 0 {
            return Ok((vec![], 0, true));
        }
        let out = solve_system(DVector::from_vec(x0), tol, opts.max_iter, |lam| system(nodes, lam))?;
        Ok((out.x.as_slice().to_vec(), out.iterations, out.converged))
    };
    let x0 = opts.initial.clone().filter(|v| v.len() == k).unwrap_or_else(|| vec![0.0; k]);
    let nodes = b.nodes(None)?;
    let (mut lambda, mut iters, mut ok) = solve(&nodes, x0)?;
    let mut nodes = nodes;
    if b.is_exact_outer() && k > 0 {
        let l = lambda.clone();
        let refine = move |nd: &Node| poly_node(nd, &l, beta).map(|v| v.1).unwrap_or_else(|_| vec![0.0; l.len()]);
        nodes = b.nodes(Some(&refine))?;
        let (l2, i2, ok2) = solve(&nodes, lambda)?;
        lambda = l2;
        iters += i2;
        ok = ok2;
    }
    // resolve the cut of the positive part in y, then re-solve on the split rules
    for _ in 0..4 {
        if !ok || k == 0 {
            break;
        }
        nodes = nodes.into_par_iter().map(|nd| b.split_at_kinks(nd, &lambda, beta)).collect::<Result<Vec<_>>>()?;
        let (l2, i2, ok2) = solve(&nodes, lambda.clone())?;
        let moved = l2.iter().zip(&lambda).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        lambda = l2;
        iters += i2;
        ok = ok2;
        if moved <= 1e-13 * (1.0 + lambda.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    if !ok {
        return Err(Error::Infeasible("no multiplier satisfies the views under the prescribed marginal".into()));
    }
    let parts = nodes.iter().map(|nd| poly_node(nd, &lambda, beta)).collect::<Result<Vec<_>>>()?;
    let cut = parts.iter().any(|p| p.3);
    let zetas: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let lc = dot(&lambda, &view.c);
    let strong = zetas.iter().zip(&nodes).all(|(z, nd)| z + node_eps(nd, beta) * beta * lc > 0.0);
    let post = ConditionalTilt { prior: b.prior().clone(), view: view.clone(), lambda, nodes, scale: zetas };
    let m = post.moments();
    let residuals = m.iter().zip(&view.c).map(|(a, c)| (a - c).abs()).collect();
    let status = if cut || !strong { Status::NotStronglyFeasible } else { Status::Converged };
    let dual_value = post.polynomial_divergence(beta);
    Ok((post, SolveReport { residuals, dual_value, iterations: iters, status }))
}

impl ConditionalTilt {
    /// Posterior for given multipliers, on a rule adapted to them.
    pub fn from_lambda(prior: &Prior, view: &MarginalView, lambda: Vec<f64>, eng: &ExpectationEngine) -> Result<Self> {
        if lambda.len() != view.k() {
            return Err(Error::InvalidInput(format!("expected {} multipliers, got {}", view.k(), lambda.len())));
        }
        let b = Builder::new(prior, view, eng)?;
        let l = lambda.clone();
        let (nodes, scale) = match view.beta {
            None => {
                let refine = move |nd: &Node| exp_node(nd, &l, false).1;
                let nodes = if b.is_exact_outer() && !lambda.is_empty() { b.nodes(Some(&refine))? } else { b.nodes(None)? };
                let scale = nodes.iter().map(|nd| exp_node(nd, &lambda, false).0).collect();
                (nodes, scale)
            }
            Some(beta) => {
                let refine = move |nd: &Node| poly_node(nd, &l, beta).map(|v| v.1).unwrap_or_else(|_| vec![0.0; l.len()]);
                let nodes = if b.is_exact_outer() && !lambda.is_empty() { b.nodes(Some(&refine))? } else { b.nodes(None)? };
                let nodes = nodes.into_par_iter().map(|nd| b.split_at_kinks(nd, &lambda, beta)).collect::<Result<Vec<_>>>()?;
                let scale = nodes.iter().map(|nd| poly_node(nd, &lambda, beta).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
                (nodes, scale)
            }
        };
        Ok(Self { prior: b.prior().clone(), view: view.clone(), lambda, nodes, scale })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn beta(&self) -> Option<f64> {
        self.view.beta
    }

    pub fn view(&self) -> &MarginalView {
        &self.view
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// Number of outer nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Posterior conditional weights and log density ratios `log(f̃/f)` at the nodes of `nd`.
    fn node_posterior(&self, nd: &Node, scale: f64) -> (Vec<f64>, Vec<f64>) {
        match self.view.beta {
            None => {
                let t: Vec<f64> = nd.hv.iter().map(|h| dot(&self.lambda, h) - scale).collect();
                let p = t.iter().zip(&nd.yw).map(|(t, w)| w * t.exp()).collect();
                (p, t.iter().map(|t| nd.log_ratio + t).collect())
            }
            Some(beta) => {
                let eb = node_eps(nd, beta) * beta;
                let l: Vec<f64> = nd.hv.iter().map(|h| pos_pow(poly_u(scale, eb, &self.lambda, h), 1.0 / beta)).collect();
                let p = l.iter().zip(&nd.yw).map(|(l, w)| w * l).collect();
                (p, l.iter().map(|l| nd.log_ratio + l.ln()).collect())
            }
        }
    }

    /// `E_posterior[φ(x, y)]` on the solver's rule.
    pub fn expect_vec(&self, m: usize, phi: &(dyn Fn(&[f64], &mut [f64]) + Sync)) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .nodes
            .par_iter()
            .zip(&self.scale)
            .map(|(nd, s)| {
                let (p, _) = self.node_posterior(nd, *s);
                let mut acc = vec![0.0; m];
                let mut buf = vec![0.0; m];
                let mut pt = nd.x.clone();
                for (y, w) in nd.ys.iter().zip(&p) {
                    if *w == 0.0 {
                        continue;
                    }
                    pt.truncate(nd.x.len());
                    pt.extend_from_slice(y);
                    phi(&pt, &mut buf);
                    for i in 0..m {
                        acc[i] += nd.weight * w * buf[i];
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; m];
        for p in parts {
            for i in 0..m {
                out[i] += p[i];
            }
        }
        out
    }

    /// `E_posterior[h_i]`.
    pub fn moments(&self) -> Vec<f64> {
        let h = &self.view.h;
        self.expect_vec(h.len(), &|pt, o| {
            for (slot, f) in o.iter_mut().zip(h) {
                *slot = f.eval(pt);
            }
        })
    }

    /// `∫ (dν/dμ) log(dν/dμ) dμ` on the solver's rule.
    pub fn i_divergence(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.scale)
            .map(|(nd, s)| {
                let (p, l) = self.node_posterior(nd, *s);
                nd.weight * p.iter().zip(&l).filter(|(p, _)| **p > 0.0).map(|(p, l)| p * l).sum::<f64>()
            })
            .sum()
    }

    /// Split of the I-divergence into `∫ g log(g/f_X)` and `E_g[D(ν(·|x) ‖ μ(·|x))]`.
    pub fn i_divergence_parts(&self) -> (f64, f64) {
        let mut marginal = 0.0;
        let mut conditional = 0.0;
        for (nd, s) in self.nodes.iter().zip(&self.scale) {
            let (p, _) = self.node_posterior(nd, *s);
            marginal += nd.weight * nd.log_ratio;
            conditional += nd.weight
                * p.iter().zip(&nd.yw).filter(|(p, _)| **p > 0.0).map(|(p, w)| p * (p / w).ln()).sum::<f64>();
        }
        (marginal, conditional)
    }

    /// `∫ (dν/dμ)^{β+1} dμ` on the solver's rule.
    pub fn polynomial_divergence(&self, beta: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.scale)
            .map(|(nd, s)| {
                let (p, l) = self.node_posterior(nd, *s);
                nd.weight * p.iter().zip(&l).filter(|(p, _)| **p > 0.0).map(|(p, l)| p * (beta * l).exp()).sum::<f64>()
            })
            .sum()
    }

    /// `Z(x) = ∫ e^{λ·h} f(y|x) dy` (exponential) or `ζ(x)` (polynomial).
    pub fn per_x_normalizer(&self, x: &[f64], eng: &ExpectationEngine) -> Result<f64> {
        let nd = self.node_at(x, eng)?;
        match self.view.beta {
            None => Ok(exp_node(&nd, &self.lambda, false).0.exp()),
            Some(beta) => Ok(poly_zeta(&nd, &self.lambda, beta)? * (beta * nd.log_ratio).exp()),
        }
    }

    fn node_at(&self, x: &[f64], eng: &ExpectationEngine) -> Result<Node> {
        let b = Builder::new(&self.prior, &self.view, eng)?;
        let gx = match &self.view.g_marginal {
            Prior::Density(g) => g.pdf(x),
            Prior::Cloud(c) => c.points().iter().zip(c.weights()).filter(|(p, _)| p.as_slice() == x).map(|(_, w)| w).sum(),
        };
        let nd = b.node(x.to_vec(), 1.0, gx)?.ok_or(Error::NotAbsolutelyContinuous)?;
        match self.view.beta {
            Some(beta) => b.split_at_kinks(nd, &self.lambda, beta),
            None => Ok(nd),
        }
    }

    /// Posterior mean and covariance of `Y` given `X = x`.
    pub fn conditional_moments(&self, x: &[f64], eng: &ExpectationEngine) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let nd = self.node_at(x, eng)?;
        let scale = match self.view.beta {
            None => exp_node(&nd, &self.lambda, false).0,
            Some(beta) => poly_zeta(&nd, &self.lambda, beta)?,
        };
        let (p, _) = self.node_posterior(&nd, scale);
        let q = nd.ys.first().map_or(0, |y| y.len());
        let mut m = DVector::zeros(q);
        let mut s = DMatrix::zeros(q, q);
        for (y, w) in nd.ys.iter().zip(&p) {
            let y = DVector::from_column_slice(y);
            m += *w * &y;
            s += *w * &y * y.transpose();
        }
        s -= &m * m.transpose();
        Ok((m, s))
    }

    /// Joint posterior density at `(x, y)` for an analytic prior.
    pub fn pdf(&self, x: &[f64], y: &[f64], eng: &ExpectationEngine) -> Result<f64> {
        let (Prior::Density(f), Prior::Density(g)) = (&self.prior, &self.view.g_marginal) else {
            return Err(Error::InvalidInput("densities need an analytic prior and marginal".into()));
        };
        let pt: Vec<f64> = x.iter().chain(y).copied().collect();
        let fxy = f.pdf(&pt);
        if fxy == 0.0 || g.pdf(x) == 0.0 {
            return Ok(0.0);
        }
        let nd = self.node_at(x, eng)?;
        let h: Vec<f64> = self.view.h.iter().map(|h| h.eval(&pt)).collect();
        Ok(match self.view.beta {
            None => {
                let lz = exp_node(&nd, &self.lambda, false).0;
                (fxy.ln() + nd.log_ratio + dot(&self.lambda, &h) - lz).exp()
            }
            Some(beta) => {
                let z = poly_zeta(&nd, &self.lambda, beta)?;
                let u = poly_u(z, node_eps(&nd, beta) * beta, &self.lambda, &h);
                (fxy.ln() + nd.log_ratio).exp() * pos_pow(u, 1.0 / beta)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::SampleCloud;
    use crate::gaussian::{markowitz_update, GaussianPrior};

    fn bivariate(rho: f64) -> Density {
        Density::gaussian_nd(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])).unwrap()
    }

    #[test]
    fn no_views_replace_the_marginal() {
        let eng = ExpectationEngine::default();
        let g = Density::student_t(5.0, 0.3, 1.0).unwrap();
        let view = MarginalView::new(g.clone(), vec![], vec![], None).unwrap();
        let (post, rep) = solve_marginal_i(&bivariate(0.5).into(), &view, &eng).unwrap();
        assert_eq!(rep.iterations, 0);
        // E[X] under the posterior is the marginal's mean
        let m = post.expect_vec(2, &|p, o| {
            o[0] = 1.0;
            o[1] = p[0];
        });
        assert!((m[0] - 1.0).abs() < 1e-9 && (m[1] - 0.3).abs() < 1e-8);
        let view = MarginalView::new(g, vec![], vec![], Some(0.5)).unwrap();
        let (post2, _) = solve_marginal_poly(&bivariate(0.5).into(), &view, &eng).unwrap();
        let y = |p: &ConditionalTilt| p.expect_vec(1, &|p, o| o[0] = p[1] * p[1])[0];
        assert!((y(&post) - y(&post2)).abs() < 1e-9);
    }

    #[test]
    fn own_marginal_and_mean_give_zero_multiplier() {
        let eng = ExpectationEngine::default();
        let prior = bivariate(0.4);
        let view = MarginalView::new(Density::gaussian(0.0, 1.0).unwrap(), vec![Payoff::coordinate(1, 2)], vec![0.0], None).unwrap();
        let (post, rep) = solve_marginal_i(&prior.into(), &view, &eng).unwrap();
        assert!(post.lambda()[0].abs() < 1e-10);
        assert!(rep.max_residual() < 1e-10);
    }

    #[test]
    fn heavy_marginal_matches_the_closed_form() {
        let eng = ExpectationEngine::default();
        let rho = 0.6;
        let g = Density::student_t(3.0, 0.0, 1.0 / 3f64.sqrt()).unwrap();
        let view = MarginalView::new(g.clone(), vec![Payoff::coordinate(1, 2)], vec![0.5], None).unwrap();
        let (post, rep) = solve_marginal_i(&bivariate(rho).into(), &view, &eng).unwrap();
        assert!(rep.max_residual() < 1e-10);
        let gp = GaussianPrior::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]), &[0]).unwrap();
        let cf = markowitz_update(&gp, &g, &DVector::from_element(1, 0.5)).unwrap();
        assert!((post.lambda()[0] - cf.lambda[0]).abs() < 1e-8, "{} vs {}", post.lambda()[0], cf.lambda[0]);
    }

    #[test]
    fn marginal_is_exact_and_divergence_splits() {
        let eng = ExpectationEngine::default();
        let g = Density::gaussian(0.5, 0.5).unwrap();
        let h = vec![Payoff::coordinate(1, 2), Payoff::custom(|p| p[0] * p[1])];
        let view = MarginalView::new(g.clone(), h, vec![0.4, 0.6], None).unwrap();
        let (post, _) = solve_marginal_i(&bivariate(0.3).into(), &view, &eng).unwrap();
        let cfg = QuadSettings { abs_tol: 1e-300, rel_tol: 1e-11, max_intervals: 500 };
        for x in [-1.5, -0.2, 0.5, 1.1, 2.4] {
            let r = integrate(
                |y, o| o[0] = post.pdf(&[x], &[y], &eng).unwrap(),
                &segments(f64::NEG_INFINITY, f64::INFINITY, &[], 0.0, 1.0),
                1,
                &cfg,
            )
            .unwrap();
            let gx = g.pdf(&[x]);
            assert!((r.values[0] - gx).abs() < 1e-8 * gx.max(1e-3), "{x}");
        }
        let (a, b) = post.i_divergence_parts();
        assert!((a + b - post.i_divergence()).abs() < 1e-10);
        // marginal part: KL(N(0.5, 0.5) ‖ N(0, 1))
        let want = 0.5 * (0.5 + 0.25 - 1.0 - 0.5f64.ln());
        assert!((a - want).abs() < 1e-9);
    }

    #[test]
    fn two_starts_agree() {
        let eng = ExpectationEngine::default();
        let g = Density::student_t(4.0, 0.2, 0.8).unwrap();
        let h = vec![Payoff::coordinate(1, 2), Payoff::custom(|p| p[1] * p[1])];
        let view = MarginalView::new(g, h, vec![0.3, 1.2], None).unwrap();
        let prior: Prior = bivariate(0.5).into();
        let a = solve_marginal_i(&prior, &view, &eng).unwrap().0;
        let opts = SolverOptions { initial: Some(vec![1.0, -0.2]), ..SolverOptions::default() };
        let b = solve_marginal_i_with(&prior, &view, &eng, &opts).unwrap().0;
        for (x, y) in a.lambda().iter().zip(b.lambda()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rebuilt_posterior_reproduces_the_residuals() {
        let eng = ExpectationEngine::default();
        let g = Density::student_t(4.0, 0.2, 0.8).unwrap();
        let prior: Prior = bivariate(0.5).into();
        for beta in [None, Some(1.0)] {
            let view = MarginalView::new(g.clone(), vec![Payoff::coordinate(1, 2)], vec![0.3], beta).unwrap();
            let (post, rep) = if beta.is_some() { solve_marginal_poly(&prior, &view, &eng) } else { solve_marginal_i(&prior, &view, &eng) }.unwrap();
            let again = ConditionalTilt::from_lambda(&prior, &view, post.lambda().to_vec(), &eng).unwrap();
            let r = (again.moments()[0] - 0.3).abs();
            assert!((r - rep.residuals[0]).abs() < 1e-9, "{beta:?}: {r} vs {}", rep.residuals[0]);
        }
    }

    #[test]
    fn small_beta_approaches_the_exponential_tilt() {
        let eng = ExpectationEngine::default();
        let g = Density::student_t(5.0, 0.0, 0.9).unwrap();
        let h = vec![Payoff::coordinate(1, 2)];
        let prior: Prior = bivariate(0.5).into();
        let li = solve_marginal_i(&prior, &MarginalView::new(g.clone(), h.clone(), vec![0.4], None).unwrap(), &eng).unwrap().0.lambda()[0];
        let mut last = f64::INFINITY;
        for beta in [1e-1, 1e-2, 1e-4] {
            let view = MarginalView::new(g.clone(), h.clone(), vec![0.4], Some(beta)).unwrap();
            let (post, rep) = solve_marginal_poly(&prior, &view, &eng).unwrap();
            assert!(rep.max_residual() < 1e-9);
            let gap = (post.lambda()[0] - li).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-3 * li.abs().max(1.0));
    }

    #[test]
    fn discrete_table_matches_brute_force() {
        let eng = ExpectationEngine::default();
        // prior on {0,1}², X-marginal moved to (0.3, 0.7), view E[Y] = 0.6
        let prior = SampleCloud::from_masses(
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            vec![0.4, 0.1, 0.2, 0.3],
        )
        .unwrap();
        let g = SampleCloud::from_masses(vec![vec![0.0], vec![1.0]], vec![0.3, 0.7]).unwrap();
        let beta = 1.0;
        let view = MarginalView::new(g, vec![Payoff::coordinate(1, 2)], vec![0.6], Some(beta)).unwrap();
        let (post, rep) = solve_marginal_poly(&prior.into(), &view, &eng).unwrap();
        assert!(rep.max_residual() < 1e-12);
        // feasible tables: ν(0,1) = s, ν(1,1) = 0.6 − s
        let f = [0.4, 0.1, 0.2, 0.3];
        let obj = |s: f64| {
            let v = [0.3 - s, s, 0.7 - (0.6 - s), 0.6 - s];
            v.iter().zip(&f).map(|(v, f)| (v / f).powf(beta + 1.0) * f).sum::<f64>()
        };
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..=300_000 {
            let s = (0.3f64).min(0.6) * i as f64 / 300_000.0;
            let v = obj(s);
            if v < best {
                best = v;
                arg = s;
            }
        }
        let got = post.expect_vec(1, &|p, o| o[0] = if p[0] == 0.0 && p[1] == 1.0 { 1.0 } else { 0.0 })[0];
        assert!((got - arg).abs() < 1e-5, "{got} vs {arg}");
        assert!((post.polynomial_divergence(beta) - best).abs() < 1e-9);
        // multiplier from the brute-force table: L = ζ(x) + λy
        let l = |v: f64, f: f64| v / f;
        let lam = l(arg, 0.1) - l(0.3 - arg, 0.4);
        assert!((post.lambda()[0] - lam).abs() < 1e-4);
    }
}
