//! I-divergence, polynomial divergence, relative Tsallis and Renyi entropies
//! and total variation, all measured against a base prior through the
//! Radon-Nikodym ratio `dν/dμ`.

use std::cell::Cell;

use crate::dist::{Density, ExpectationEngine, Prior, SampleCloud};
use crate::error::{Error, Result};
use crate::quadrature::{integrate, segments, QuadSettings};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    IDivergence,
    Polynomial { beta: f64 },
    Tsallis { alpha: f64 },
    Renyi { gamma: f64 },
    TotalVariation,
}

/// A divergence value; `+∞` is a legitimate result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceValue {
    pub kind: DivergenceKind,
    pub value: f64,
}

pub type RatioFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// `E_base[F(ratio)]`, mapping divergent integrals to `+∞` and invalid ratios
/// to [`Error::NotAbsolutelyContinuous`].
fn ratio_functional(
    ratio: RatioFn,
    base: &Prior,
    eng: &ExpectationEngine,
    breaks: &[(usize, f64)],
    f: impl Fn(f64) -> f64 + Sync,
) -> Result<f64> {
    let bad = std::sync::atomic::AtomicBool::new(false);
    let phi = |x: &[f64], o: &mut [f64]| {
        let r = ratio(x);
        if !(r.is_finite() && r >= 0.0) {
            bad.store(true, std::sync::atomic::Ordering::Relaxed);
            o[0] = 0.0;
        } else {
            o[0] = f(r);
        }
    };
    let r = base.expect_vec(eng, 1, breaks, &phi);
    if bad.load(std::sync::atomic::Ordering::Relaxed) {
        return Err(Error::NotAbsolutelyContinuous);
    }
    match r {
        Ok(e) => Ok(e.value()),
        Err(Error::DivergentIntegral(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn xlogx(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r.ln()
    }
}

/// `D(ν‖μ) = ∫ r log r dμ`.
pub fn i_divergence(ratio: RatioFn, base: &Prior, eng: &ExpectationEngine) -> Result<DivergenceValue> {
    i_divergence_with_breaks(ratio, base, eng, &[])
}

pub(crate) fn i_divergence_with_breaks(
    ratio: RatioFn,
    base: &Prior,
    eng: &ExpectationEngine,
    breaks: &[(usize, f64)],
) -> Result<DivergenceValue> {
    let v = ratio_functional(ratio, base, eng, breaks, xlogx)?;
    Ok(DivergenceValue { kind: DivergenceKind::IDivergence, value: v.max(0.0) })
}

/// `I_β(ν‖μ) = ∫ r^{β+1} dμ`.
pub fn polynomial_divergence(ratio: RatioFn, base: &Prior, beta: f64, eng: &ExpectationEngine) -> Result<DivergenceValue> {
    polynomial_divergence_with_breaks(ratio, base, beta, eng, &[])
}

pub(crate) fn polynomial_divergence_with_breaks(
    ratio: RatioFn,
    base: &Prior,
    beta: f64,
    eng: &ExpectationEngine,
    breaks: &[(usize, f64)],
) -> Result<DivergenceValue> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let v = ratio_functional(ratio, base, eng, breaks, |r| if r == 0.0 { 0.0 } else { r.powf(beta + 1.0) })?;
    Ok(DivergenceValue { kind: DivergenceKind::Polynomial { beta }, value: v })
}

/// Relative Tsallis entropy `S_α = (I_α − 1)/α`.
pub fn tsallis(ratio: RatioFn, base: &Prior, alpha: f64, eng: &ExpectationEngine) -> Result<DivergenceValue> {
    let i = polynomial_divergence(ratio, base, alpha, eng)?.value;
    Ok(DivergenceValue { kind: DivergenceKind::Tsallis { alpha }, value: tsallis_from_polynomial(i, alpha) })
}

/// Relative Renyi entropy `H_γ = log(∫ r^γ dμ)/(γ − 1)`, `γ > 1`.
pub fn renyi(ratio: RatioFn, base: &Prior, gamma: f64, eng: &ExpectationEngine) -> Result<DivergenceValue> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("renyi order must exceed 1, got {gamma}")));
    }
    let m = ratio_functional(ratio, base, eng, &[], |r| if r == 0.0 { 0.0 } else { r.powf(gamma) })?;
    Ok(DivergenceValue { kind: DivergenceKind::Renyi { gamma }, value: m.ln() / (gamma - 1.0) })
}

/// `S_β = (I_β − 1)/β`.
pub fn tsallis_from_polynomial(i_beta: f64, beta: f64) -> f64 {
    (i_beta - 1.0) / beta
}

/// `H_{β+1} = log(I_β)/β`.
pub fn renyi_from_polynomial(i_beta: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    if i_beta.is_nan() || i_beta < 1.0 {
        return Err(Error::InvalidInput(format!("polynomial divergence is at least 1, got {i_beta}")));
    }
    Ok(i_beta.ln() / beta)
}

/// `(1/2) E_base|r − 1|`: total variation between `ν = r·μ` and `μ`.
pub fn total_variation_ratio(ratio: RatioFn, base: &Prior, eng: &ExpectationEngine) -> Result<DivergenceValue> {
    let v = ratio_functional(ratio, base, eng, &[], |r| (r - 1.0).abs())?;
    Ok(DivergenceValue { kind: DivergenceKind::TotalVariation, value: (0.5 * v).min(1.0) })
}

/// `(1/2) Σ |w_i − v_i|` for clouds on an identical point set.
pub fn total_variation_clouds(p: &SampleCloud, q: &SampleCloud) -> Result<DivergenceValue> {
    if p.points() != q.points() {
        return Err(Error::SupportMismatch("clouds must share their point set".into()));
    }
    let v: f64 = p.weights().iter().zip(q.weights()).map(|(a, b)| (a - b).abs()).sum();
    Ok(DivergenceValue { kind: DivergenceKind::TotalVariation, value: (0.5 * v).min(1.0) })
}

/// `(1/2) ∫ |p − q|` for two 1-D densities; `breaks` marks kinks of either pdf.
pub fn total_variation_densities(p: &Density, q: &Density, breaks: &[f64], eng: &ExpectationEngine) -> Result<DivergenceValue> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::SupportMismatch("density total variation is implemented in one dimension".into()));
    }
    let (a1, b1) = p.support()[0];
    let (a2, b2) = q.support()[0];
    let (lo, hi) = (a1.min(a2), b1.max(b2));
    let (c, s, mut pts) = q.hints_1d();
    pts.extend(p.hints_1d().2);
    pts.extend_from_slice(breaks);
    for v in [a1, b1, a2, b2] {
        if v.is_finite() {
            pts.push(v);
        }
    }
    let segs = segments(lo, hi, &pts, c, s);
    let bad = Cell::new(false);
    let cfg = QuadSettings { abs_tol: eng.abs_tol, rel_tol: eng.rel_tol, max_intervals: 4000 };
    let r = integrate(
        |x, o| {
            let (u, v) = (p.pdf(&[x]), q.pdf(&[x]));
            if u.is_nan() || v.is_nan() {
                bad.set(true);
                o[0] = 0.0;
            } else {
                o[0] = (u - v).abs();
            }
        },
        &segs,
        1,
        &cfg,
    )?;
    if bad.get() {
        return Err(Error::InvalidInput("pdf is undefined on the support".into()));
    }
    Ok(DivergenceValue { kind: DivergenceKind::TotalVariation, value: (0.5 * r.values[0]).min(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn two_point(mu: &[f64]) -> Prior {
        let pts = (0..mu.len()).map(|i| vec![i as f64]).collect();
        Prior::Cloud(SampleCloud::new(pts, mu.to_vec()).unwrap())
    }

    fn ratio_of(nu: Vec<f64>, mu: Vec<f64>) -> impl Fn(&[f64]) -> f64 + Sync {
        move |x: &[f64]| nu[x[0] as usize] / mu[x[0] as usize]
    }

    #[test]
    fn discrete_examples() {
        let eng = ExpectationEngine::default();
        let base = two_point(&[0.5, 0.5]);
        let r = ratio_of(vec![0.9, 0.1], vec![0.5, 0.5]);
        let d = i_divergence(&r, &base, &eng).unwrap().value;
        assert!((d - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-15);
        let i1 = polynomial_divergence(&r, &base, 1.0, &eng).unwrap().value;
        assert!((i1 - 1.64).abs() < 1e-14);
        let s1 = tsallis(&r, &base, 1.0, &eng).unwrap().value;
        assert!((i1 - (1.0 + s1)).abs() < 1e-15);
        assert!((renyi_from_polynomial(1.64, 1.0).unwrap() - 1.64f64.ln()).abs() < 1e-15);
        assert_eq!(renyi_from_polynomial(1.0, 0.3).unwrap(), 0.0);
        assert!(renyi_from_polynomial(0.99, 1.0).is_err());

        let one = |_: &[f64]| 1.0;
        assert_eq!(i_divergence(&one, &base, &eng).unwrap().value, 0.0);
        assert_eq!(polynomial_divergence(&one, &base, 0.7, &eng).unwrap().value, 1.0);

        let p = SampleCloud::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        let q = SampleCloud::new(vec![vec![0.0], vec![1.0]], vec![0.9, 0.1]).unwrap();
        assert!((total_variation_clouds(&p, &q).unwrap().value - 0.4).abs() < 1e-15);
        assert_eq!(total_variation_clouds(&p, &p).unwrap().value, 0.0);
        let other = SampleCloud::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
        assert!(matches!(total_variation_clouds(&p, &other), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn exponential_pair_closed_form() {
        let eng = ExpectationEngine::default();
        let (a, g) = (2.0, 0.5);
        let base = Prior::Density(Density::exponential(a).unwrap());
        let r = move |x: &[f64]| (g / a) * ((a - g) * x[0]).exp();
        let d = i_divergence(&r, &base, &eng).unwrap().value;
        let exact = (g / a).ln() + (a - g) / g;
        assert!((d - exact).abs() < 1e-10, "{d} vs {exact}");
    }

    #[test]
    fn undefined_ratio_is_rejected() {
        let eng = ExpectationEngine::default();
        let base = two_point(&[0.5, 0.5]);
        let r = |x: &[f64]| if x[0] == 0.0 { f64::NAN } else { 2.0 };
        assert!(matches!(i_divergence(&r, &base, &eng), Err(Error::NotAbsolutelyContinuous)));
    }

    #[test]
    fn divergent_integral_is_infinite() {
        let eng = ExpectationEngine::default();
        let base = Prior::Density(Density::pareto(3.0).unwrap());
        // r = (1+x)/2 integrates to one, but r² f decays like 1/x
        let r = |x: &[f64]| 0.5 * (1.0 + x[0]);
        let v = polynomial_divergence(&r, &base, 1.0, &eng).unwrap().value;
        assert!(v.is_infinite());
    }

    #[test]
    fn spike_mixture_is_close_in_total_variation() {
        // exponential base against a mixture that moves mass ε far into the tail
        let eng = ExpectationEngine::default();
        let eps = 0.01;
        let base = Density::exponential(1.0).unwrap();
        let (m, w) = (50.0, 1.0);
        let mix = Density::custom(
            Arc::new(move |x: &[f64]| {
                let spike = if x[0] >= m && x[0] < m + w { 1.0 / w } else { 0.0 };
                (1.0 - eps) * (-x[0]).exp() + eps * spike
            }),
            vec![(0.0, f64::INFINITY)],
        )
        .unwrap();
        let tv = total_variation_densities(&base, &mix, &[m, m + w], &eng).unwrap().value;
        // mass ε leaves the bulk and reappears in the spike
        assert!((tv - eps).abs() < 1e-9);
    }

    #[test]
    fn small_beta_limit() {
        let eng = ExpectationEngine::default();
        let mu = vec![0.2, 0.3, 0.5];
        let nu = vec![0.5, 0.25, 0.25];
        let base = two_point(&mu);
        let r = ratio_of(nu, mu);
        let d = i_divergence(&r, &base, &eng).unwrap().value;
        let mut last = f64::INFINITY;
        for beta in [1e-2, 1e-3, 1e-4] {
            let i = polynomial_divergence(&r, &base, beta, &eng).unwrap().value;
            let gap = ((i - 1.0) / beta - d).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-3);
    }

    fn normalise(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn floors_and_identities(
            a in prop::collection::vec(0.01f64..1.0, 2..8),
            seed in prop::collection::vec(0.01f64..1.0, 8),
            beta in 0.05f64..3.0,
        ) {
            let eng = ExpectationEngine::default();
            let mu = normalise(a.clone());
            let nu = normalise(seed[..a.len()].to_vec());
            let base = two_point(&mu);
            let r = ratio_of(nu.clone(), mu.clone());
            let d = i_divergence(&r, &base, &eng).unwrap().value;
            let i = polynomial_divergence(&r, &base, beta, &eng).unwrap().value;
            let s = tsallis(&r, &base, beta, &eng).unwrap().value;
            let h = renyi(&r, &base, beta + 1.0, &eng).unwrap().value;
            prop_assert!(d >= 0.0);
            prop_assert!(i >= 1.0 - 1e-14);
            prop_assert!(s >= -1e-14);
            // relative to I_β, which reaches 10⁴ here
            prop_assert!((i - (1.0 + beta * s)).abs() <= 1e-12 * i);
            prop_assert!((i - (beta * h).exp()).abs() <= 1e-12 * i);
            let p = SampleCloud::new(base_points(mu.len()), mu).unwrap();
            let q = SampleCloud::new(base_points(nu.len()), nu).unwrap();
            let tv = total_variation_clouds(&p, &q).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&tv));
        }

        #[test]
        fn polynomial_divergence_tracks_tsallis_and_renyi(t1 in 0.0f64..2.0, dt in 0.01f64..1.0, beta in 0.1f64..2.0) {
            // exponential-tilt family on a fixed discrete base
            let eng = ExpectationEngine::default();
            let mu = vec![0.1, 0.2, 0.3, 0.4];
            let base = two_point(&mu);
            let fam = |t: f64| {
                let w: Vec<f64> = mu.iter().enumerate().map(|(i, m)| m * (t * i as f64).exp()).collect();
                normalise(w)
            };
            let (n1, n2) = (fam(t1), fam(t1 + dt));
            let r1 = ratio_of(n1, mu.clone());
            let r2 = ratio_of(n2, mu.clone());
            let i1 = polynomial_divergence(&r1, &base, beta, &eng).unwrap().value;
            let i2 = polynomial_divergence(&r2, &base, beta, &eng).unwrap().value;
            let s1 = tsallis_from_polynomial(i1, beta);
            let s2 = tsallis_from_polynomial(i2, beta);
            let h1 = renyi_from_polynomial(i1, beta).unwrap();
            let h2 = renyi_from_polynomial(i2, beta).unwrap();
            prop_assert!(i2 > i1);
            prop_assert!(s2 > s1);
            prop_assert!(h2 > h1);
        }
    }

    fn base_points(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }
}
