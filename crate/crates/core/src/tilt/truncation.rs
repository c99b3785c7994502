//! Exponential tilts of a Pareto prior truncated to `[0, M]`. The Pareto has
//! no exponential moments, so a raised mean has no I-divergence solution; the
//! truncated solutions still exist and fade out as `M` grows.

use crate::quadrature::{integrate, QuadSettings, Segment};
use crate::error::{Error, Result};
use crate::roots::{bracket_up, brent};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPoint {
    pub m: f64,
    pub lambda: f64,
    /// I-divergence of the tilted truncated density from the full prior.
    pub kl: f64,
}

/// `(log ∫_0^M e^{λx} f, ∫_0^M x e^{λx} f / ∫_0^M e^{λx} f)` with the Lomax
/// density `f(x) = (α−1)/(1+x)^α`.
fn truncated(alpha: f64, m: f64, lambda: f64) -> Result<(f64, f64)> {
    let shift = (lambda * m - alpha * (1.0 + m).ln()).max(0.0);
    let mut cuts = vec![0.0];
    let mut b = 1.0;
    while b < m {
        cuts.push(b);
        b *= 10.0;
    }
    if lambda > 0.0 {
        let turn = alpha / lambda - 1.0;
        if turn > 0.0 && turn < m {
            cuts.push(turn);
        }
    }
    cuts.push(m);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let segs: Vec<Segment> = cuts.windows(2).map(|w| Segment::Finite { lo: w[0], hi: w[1] }).collect();
    let cfg = QuadSettings { abs_tol: 1e-300, rel_tol: 1e-13, max_intervals: 4000 };
    let r = integrate(
        |x, o| {
            let w = (alpha - 1.0) * (lambda * x - alpha * (1.0 + x).ln() - shift).exp();
            o[0] = w;
            o[1] = x * w;
        },
        &segs,
        2,
        &cfg,
    )?;
    let (n0, n1) = (r.values[0], r.values[1]);
    Ok((n0.ln() + shift, n1 / n0))
}

/// For each `M` in `m_grid`, the multiplier with `E[X | tilted, X ≤ M] = c`
/// and the divergence of that tilt from the untruncated prior.
pub fn truncated_pareto_diagnostic(alpha: f64, c: f64, m_grid: &[f64]) -> Result<Vec<TruncationPoint>> {
    if !(alpha > 2.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must exceed 2, got {alpha}")));
    }
    if m_grid.iter().any(|m| !(m.is_finite() && *m > 0.0)) || m_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("M grid must be positive and increasing".into()));
    }
    let mean = 1.0 / (alpha - 2.0);
    if !c.is_finite() || c < mean * (1.0 - 1e-12) {
        return Err(Error::InvalidInput(format!("target {c} is below the prior mean {mean}")));
    }
    let flat = (c - mean).abs() <= 1e-12 * mean;
    let mut out = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        if flat {
            out.push(TruncationPoint { m, lambda: 0.0, kl: 0.0 });
            continue;
        }
        if c >= m {
            return Err(Error::RootNotBracketed { lo: 0.0, hi: f64::INFINITY });
        }
        let f = |l: f64| match truncated(alpha, m, l) {
            Ok((_, mu)) => mu - c,
            Err(_) => f64::NAN,
        };
        let (lo, hi) = bracket_up(f, 0.0, 1.0 / m, 1e6)?;
        let lambda = brent(f, lo, hi, 1e-15, 300)?;
        let (log_z, _) = truncated(alpha, m, lambda)?;
        out.push(TruncationPoint { m, lambda, kl: lambda * c - log_z });
    }
    Ok(out)
}
