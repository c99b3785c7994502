//! Named view functions `g(x)`.

use std::fmt;
use std::sync::Arc;

/// Scalar function of a point, used by [`Payoff::Custom`].
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Payoff {
    /// `discount · (x_coord − strike)^+`
    Call { strike: f64, discount: f64, coord: usize },
    /// `discount · (strike − x_coord)^+`
    Put { strike: f64, discount: f64, coord: usize },
    /// `1[lo ≤ x_coord < hi]`
    Indicator { lo: f64, hi: f64, coord: usize },
    /// `offset + Σ coeffs_j x_j`
    Linear { coeffs: Vec<f64>, offset: f64 },
    /// `x_coord^exponent`
    Power { exponent: f64, coord: usize },
    /// `exp(rate · x_coord)`
    Exp { rate: f64, coord: usize },
    /// Arbitrary function with a caller-asserted lower bound and kinks.
    Custom { f: PointFn, lower_bound: f64, breaks: Vec<(usize, f64)> },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Call { strike, discount, coord } => write!(f, "Call(K={strike}, D={discount}, x{coord})"),
            Payoff::Put { strike, discount, coord } => write!(f, "Put(K={strike}, D={discount}, x{coord})"),
            Payoff::Indicator { lo, hi, coord } => write!(f, "Indicator([{lo}, {hi}), x{coord})"),
            Payoff::Linear { coeffs, offset } => write!(f, "Linear({coeffs:?}, {offset})"),
            Payoff::Power { exponent, coord } => write!(f, "Power(x{coord}^{exponent})"),
            Payoff::Exp { rate, coord } => write!(f, "Exp({rate}·x{coord})"),
            Payoff::Custom { lower_bound, .. } => write!(f, "Custom(inf ≥ {lower_bound})"),
        }
    }
}

impl Payoff {
    pub fn call(strike: f64, discount: f64) -> Self {
        Payoff::Call { strike, discount, coord: 0 }
    }

    pub fn put(strike: f64, discount: f64) -> Self {
        Payoff::Put { strike, discount, coord: 0 }
    }

    pub fn indicator(lo: f64, hi: f64) -> Self {
        Payoff::Indicator { lo, hi, coord: 0 }
    }

    /// `x_coord`
    pub fn coordinate(coord: usize, dim: usize) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[coord] = 1.0;
        Payoff::Linear { coeffs, offset: 0.0 }
    }

    pub fn identity() -> Self {
        Self::coordinate(0, 1)
    }

    pub fn power(exponent: f64) -> Self {
        Payoff::Power { exponent, coord: 0 }
    }

    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Payoff::Custom { f: Arc::new(f), lower_bound: f64::NEG_INFINITY, breaks: vec![] }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Payoff::Call { strike, discount, coord } => discount * (x[*coord] - strike).max(0.0),
            Payoff::Put { strike, discount, coord } => discount * (strike - x[*coord]).max(0.0),
            Payoff::Indicator { lo, hi, coord } => {
                let v = x[*coord];
                if v >= *lo && v < *hi {
                    1.0
                } else {
                    0.0
                }
            }
            Payoff::Linear { coeffs, offset } => offset + coeffs.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            Payoff::Power { exponent, coord } => {
                let v = x[*coord];
                if exponent.fract() == 0.0 && exponent.abs() < 64.0 {
                    v.powi(*exponent as i32)
                } else {
                    v.powf(*exponent)
                }
            }
            Payoff::Exp { rate, coord } => (rate * x[*coord]).exp(),
            Payoff::Custom { f, .. } => f(x),
        }
    }

    /// Kinks and jumps as `(coordinate, location)`.
    pub fn breakpoints(&self) -> Vec<(usize, f64)> {
        match self {
            Payoff::Call { strike, coord, .. } | Payoff::Put { strike, coord, .. } => vec![(*coord, *strike)],
            Payoff::Indicator { lo, hi, coord } => {
                [*lo, *hi].iter().filter(|v| v.is_finite()).map(|v| (*coord, *v)).collect()
            }
            Payoff::Custom { breaks, .. } => breaks.clone(),
            _ => vec![],
        }
    }

    /// Coordinate in which the function is piecewise linear, when it depends
    /// on a single coordinate only.
    pub fn piecewise_linear_coord(&self) -> Option<usize> {
        match self {
            Payoff::Call { coord, .. } | Payoff::Put { coord, .. } | Payoff::Indicator { coord, .. } => Some(*coord),
            Payoff::Linear { coeffs, .. } => {
                let nz: Vec<usize> = coeffs.iter().enumerate().filter(|c| *c.1 != 0.0).map(|c| c.0).collect();
                match nz.len() {
                    0 => Some(0),
                    1 => Some(nz[0]),
                    _ => None,
                }
            }
            Payoff::Power { exponent, coord } if *exponent == 1.0 || *exponent == 0.0 => Some(*coord),
            _ => None,
        }
    }

    /// Largest known lower bound of the function over a support box.
    pub fn lower_bound(&self, support: &[(f64, f64)]) -> f64 {
        match self {
            Payoff::Call { discount, .. } | Payoff::Put { discount, .. } => {
                if *discount >= 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Payoff::Indicator { .. } | Payoff::Exp { .. } => 0.0,
            Payoff::Linear { coeffs, offset } => {
                let mut lb = *offset;
                for (j, a) in coeffs.iter().enumerate() {
                    if *a == 0.0 {
                        continue;
                    }
                    let Some(&(lo, hi)) = support.get(j) else {
                        return f64::NEG_INFINITY;
                    };
                    lb += if *a > 0.0 { a * lo } else { a * hi };
                }
                if lb.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    lb
                }
            }
            Payoff::Power { exponent, coord } => {
                let lo = support.get(*coord).map(|s| s.0).unwrap_or(f64::NEG_INFINITY);
                let even = exponent.fract() == 0.0 && (*exponent as i64) % 2 == 0;
                if *exponent >= 0.0 && (even || lo >= 0.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Payoff::Custom { lower_bound, .. } => *lower_bound,
        }
    }

    /// Whether the function is nonnegative on the support box.
    pub fn is_nonneg_on(&self, support: &[(f64, f64)]) -> bool {
        self.lower_bound(support) >= 0.0
    }
}
