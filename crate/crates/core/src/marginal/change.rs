//! Views on functions `v(z)` of an underlying vector `z`.
//!
//! The prior is moved to `v`-coordinates with `f_V(v) = f_Z(w(v)) / J(w(v))`,
//! the marginal problem is solved there, and the posterior is pulled back as
//! `f̃_Z(z) = f̃_V(v(z)) J(z)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ConditionalTilt, MarginalView};
use crate::dist::{Density, ExpectationEngine, Prior};
use crate::error::{Error, Result};
use crate::payoff::Payoff;

pub type MapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type JacFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Invertible map `z ↦ v(z)` with inverse `w` and `J(z) = |det ∂v/∂z|`.
#[derive(Clone)]
pub struct ChangeOfVariables {
    pub forward: MapFn,
    pub inverse: MapFn,
    pub jacobian: JacFn,
    dim: usize,
    linear: Option<DMatrix<f64>>,
}

impl std::fmt::Debug for ChangeOfVariables {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChangeOfVariables").field("dim", &self.dim).field("linear", &self.linear).finish()
    }
}

impl ChangeOfVariables {
    pub fn new(dim: usize, forward: MapFn, inverse: MapFn, jacobian: JacFn) -> Self {
        Self { forward, inverse, jacobian, dim, linear: None }
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(DMatrix::identity(dim, dim)).expect("identity is invertible")
    }

    /// `v = A z`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidInput("a linear change of variables needs a square matrix".into()));
        }
        let det = a.determinant();
        if !(det.abs() > 1e-12 * a.amax().powi(a.nrows() as i32)) {
            return Err(Error::SingularJacobian);
        }
        let inv = a.clone().try_inverse().ok_or(Error::SingularJacobian)?;
        let (fa, ia) = (a.clone(), inv);
        let n = a.nrows();
        Ok(Self {
            forward: Arc::new(move |z| (&fa * DVector::from_column_slice(z)).iter().copied().collect()),
            inverse: Arc::new(move |v| (&ia * DVector::from_column_slice(v)).iter().copied().collect()),
            jacobian: Arc::new(move |_| det.abs()),
            dim: n,
            linear: Some(a),
        })
    }

    /// Linear map whose leading rows are `rows`; remaining rows are unit
    /// vectors `e_j` taken in order of `j` whenever they raise the rank.
    pub fn complete_linear(rows: DMatrix<f64>) -> Result<Self> {
        let n = rows.ncols();
        let mut a = rows;
        if a.nrows() > n {
            return Err(Error::InvalidInput("more rows than coordinates".into()));
        }
        let rank = |m: &DMatrix<f64>| m.clone().svd(false, false).rank(1e-10);
        if rank(&a) < a.nrows() {
            return Err(Error::SingularJacobian);
        }
        for j in 0..n {
            if a.nrows() == n {
                break;
            }
            let mut t = a.clone().insert_row(a.nrows(), 0.0);
            let r = t.nrows() - 1;
            t[(r, j)] = 1.0;
            if rank(&t) == t.nrows() {
                a = t;
            }
        }
        Self::linear(a)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        self.linear.as_ref()
    }

    /// Largest `|w(v(z)) − z|` over `points`.
    pub fn round_trip_error(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|z| (self.inverse)(&(self.forward)(z)).iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
}

/// Converts a solved `v`-space posterior into a density over `z`.
#[derive(Debug, Clone)]
pub struct Pullback {
    cov: ChangeOfVariables,
    /// `order[k]` is the `v`-index placed at position `k` of `(x, y)`.
    order: Vec<usize>,
    p: usize,
}

impl Pullback {
    /// `(x, y)` coordinates of `z`.
    pub fn to_xy(&self, z: &[f64]) -> Vec<f64> {
        let v = (self.cov.forward)(z);
        self.order.iter().map(|&i| v[i]).collect()
    }

    /// `f̃_Z(z) = f̃(x(z), y(z)) J(z)`.
    pub fn density(&self, tilt: &ConditionalTilt, z: &[f64], eng: &ExpectationEngine) -> Result<f64> {
        let xy = self.to_xy(z);
        Ok(tilt.pdf(&xy[..self.p], &xy[self.p..], eng)? * (self.cov.jacobian)(z))
    }
}

/// Transform `z_prior` through `cov` and build the marginal view: `X` is
/// `v[marginal_on]` with law `g`, the views are `E[v_j] = targets` for `j` in
/// `moments_on`, and all other coordinates follow in `Y`.
pub fn lift_views(
    cov: &ChangeOfVariables,
    z_prior: &Density,
    g: impl Into<Prior>,
    marginal_on: &[usize],
    moments_on: &[usize],
    targets: Vec<f64>,
    beta: Option<f64>,
) -> Result<(Density, MarginalView, Pullback)> {
    let n = cov.dim();
    if z_prior.dim() != n {
        return Err(Error::InvalidInput(format!("prior has dimension {} but the map has {n}", z_prior.dim())));
    }
    let mut seen = vec![false; n];
    for &i in marginal_on.iter().chain(moments_on) {
        if i >= n || seen[i] {
            return Err(Error::InvalidInput("marginal and moment indices must be distinct and in range".into()));
        }
        seen[i] = true;
    }
    if moments_on.len() != targets.len() {
        return Err(Error::InvalidInput("one target per moment index is required".into()));
    }
    let mut order: Vec<usize> = marginal_on.iter().chain(moments_on).copied().collect();
    order.extend((0..n).filter(|i| !seen[*i]));
    let p = marginal_on.len();
    let perm = DMatrix::from_fn(n, n, |r, c| if order[r] == c { 1.0 } else { 0.0 });

    let prior = match (cov.matrix(), z_prior.gaussian_params()) {
        (Some(a), Some((mu, sigma))) => {
            let b = &perm * a;
            let s = &b * sigma * b.transpose();
            Density::gaussian_nd(&b * mu, 0.5 * (&s + s.transpose()))?
        }
        _ => {
            let (inv, jac, zp) = (cov.inverse.clone(), cov.jacobian.clone(), z_prior.clone());
            let ord = order.clone();
            let pdf = Arc::new(move |xy: &[f64]| {
                let mut v = vec![0.0; xy.len()];
                for (k, &i) in ord.iter().enumerate() {
                    v[i] = xy[k];
                }
                let z = inv(&v);
                let j = jac(&z);
                if j > 0.0 {
                    zp.pdf(&z) / j
                } else {
                    0.0
                }
            });
            Density::custom(pdf, vec![(f64::NEG_INFINITY, f64::INFINITY); n])?
        }
    };
    let h = (0..moments_on.len()).map(|k| Payoff::coordinate(p + k, n)).collect();
    let view = MarginalView::new(g, h, targets, beta)?;
    Ok((prior, view, Pullback { cov: cov.clone(), order, p }))
}
