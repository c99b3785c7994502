//! Low-level numerical integration.
//!
//! Globally adaptive Gauss-Kronrod (G10/K21) quadrature for vector-valued
//! integrands over unions of finite and semi-infinite segments, plus
//! probabilists' Gauss-Hermite rules for Gaussian expectations.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::QuadError;

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_060,
    0.865_063_366_688_984_510_732_096_688_423,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_115,
    0.562_757_134_668_604_683_339_000_099_273,
    0.433_395_394_129_247_190_799_265_943_166,
    0.294_392_862_701_460_198_131_126_603_104,
    0.148_874_338_981_631_210_884_826_001_130,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062,
    0.032_558_162_307_964_727_478_818_972_459,
    0.054_755_896_574_351_996_031_381_300_245,
    0.075_039_674_810_919_952_767_043_140_916,
    0.093_125_454_583_697_605_535_065_465_083,
    0.109_387_158_802_297_641_899_210_590_326,
    0.123_491_976_262_065_851_077_208_233_972,
    0.134_709_217_311_473_325_928_054_001_772,
    0.142_775_938_577_060_080_797_094_273_139,
    0.147_739_104_901_338_491_374_841_515_972,
    0.149_445_554_002_916_905_664_936_468_390,
];

// Gauss weights for XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893,
    0.149_451_349_150_580_593_145_776_339_658,
    0.219_086_362_515_982_043_995_534_934_228,
    0.269_266_719_309_996_355_091_226_921_569,
    0.295_524_224_714_752_870_173_892_994_651,
];

/// A piece of the real line mapped onto a finite parameter interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    /// `[lo, hi]`, integrated directly.
    Finite { lo: f64, hi: f64 },
    /// `[lo, ∞)` via `x = lo + scale·t/(1-t)`, `t ∈ [0, 1)`.
    Upper { lo: f64, scale: f64 },
    /// `(-∞, hi]` via `x = hi - scale·t/(1-t)`, `t ∈ [0, 1)`.
    Lower { hi: f64, scale: f64 },
}

impl Segment {
    fn param_range(&self) -> (f64, f64) {
        match *self {
            Segment::Finite { lo, hi } => (lo, hi),
            _ => (0.0, 1.0),
        }
    }

    #[inline]
    fn map(&self, t: f64) -> (f64, f64) {
        match *self {
            Segment::Finite { .. } => (t, 1.0),
            Segment::Upper { lo, scale } => {
                let s = 1.0 - t;
                (lo + scale * t / s, scale / (s * s))
            }
            Segment::Lower { hi, scale } => {
                let s = 1.0 - t;
                (hi - scale * t / s, scale / (s * s))
            }
        }
    }
}

/// Split an interval `[lo, hi]` (either end possibly infinite) at the given
/// interior breakpoints and return mapped segments.
///
/// `center` and `scale` shape the rational map on infinite pieces.
pub fn segments(lo: f64, hi: f64, breaks: &[f64], center: f64, scale: f64) -> Vec<Segment> {
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    let mut pts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| b.is_finite() && *b > lo && *b < hi)
        .collect();
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY && pts.is_empty() {
        pts.push(if center.is_finite() { center } else { 0.0 });
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();

    let mut knots = Vec::with_capacity(pts.len() + 2);
    knots.push(lo);
    knots.extend(pts);
    knots.push(hi);

    let mut out = Vec::with_capacity(knots.len() - 1);
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = match (a.is_finite(), b.is_finite()) {
            (true, true) => Segment::Finite { lo: a, hi: b },
            (true, false) => Segment::Upper { lo: a, scale },
            (false, true) => Segment::Lower { hi: b, scale },
            (false, false) => unreachable!("doubly infinite pieces are split above"),
        };
        out.push(seg);
    }
    out
}

/// Accuracy requirements for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self { abs_tol: 1e-14, rel_tol: 1e-12, max_intervals: 4000 }
    }
}

/// Result of a vector-valued adaptive integration.
#[derive(Debug, Clone)]
pub struct VecIntegral {
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    /// Integral of the absolute integrand, per component.
    pub abs_values: Vec<f64>,
    pub converged: bool,
    /// Final partition as `(segment index, t_lo, t_hi)` in parameter space.
    pub partition: Vec<(usize, f64, f64)>,
}

impl VecIntegral {
    pub fn intervals(&self) -> usize {
        self.partition.len()
    }
}

/// Expand a partition into the underlying Kronrod nodes: `(x, weight)` pairs
/// such that `Σ w·φ(x)` reproduces the integral of `φ` at the final accuracy.
pub fn kronrod_rule(segs: &[Segment], partition: &[(usize, f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(partition.len() * 21);
    for &(s, a, b) in partition {
        let seg = segs[s];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let (x, j) = seg.map(c);
        out.push((x, WGK[10] * h * j));
        for k in 0..10 {
            for t in [c - h * XGK[k], c + h * XGK[k]] {
                let (x, j) = seg.map(t);
                out.push((x, WGK[k] * h * j));
            }
        }
    }
    out
}

struct Piece {
    seg: usize,
    a: f64,
    b: f64,
    vals: Vec<f64>,
    errs: Vec<f64>,
    absv: Vec<f64>,
    splittable: bool,
}

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut e = err.abs();
    if res_asc != 0.0 && e != 0.0 {
        let scale = (200.0 * e / res_asc).powf(1.5);
        e = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        let min_err = 50.0 * f64::EPSILON * res_abs;
        if min_err > e {
            e = min_err;
        }
    }
    e
}

struct Scratch {
    fv: Vec<Vec<f64>>,
    buf: Vec<f64>,
}

fn kronrod<F>(f: &mut F, seg: &Segment, a: f64, b: f64, m: usize, sc: &mut Scratch) -> Result<Piece, QuadError>
where
    F: FnMut(f64, &mut [f64]),
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    // node order: 0 = center, then (-x_k, +x_k) pairs for k = 0..10
    let mut eval = |t: f64, slot: usize, sc: &mut Scratch| -> Result<(), QuadError> {
        let (x, jac) = seg.map(t);
        sc.buf.iter_mut().for_each(|v| *v = 0.0);
        f(x, &mut sc.buf);
        for j in 0..m {
            let v = if sc.buf[j] == 0.0 { 0.0 } else { sc.buf[j] * jac };
            if !v.is_finite() {
                return Err(QuadError::NonFinite { x });
            }
            sc.fv[slot][j] = v;
        }
        Ok(())
    };
    eval(center, 0, sc)?;
    for k in 0..10 {
        let dx = half * XGK[k];
        eval(center - dx, 1 + 2 * k, sc)?;
        eval(center + dx, 2 + 2 * k, sc)?;
    }

    let mut vals = vec![0.0; m];
    let mut errs = vec![0.0; m];
    let mut absv = vec![0.0; m];
    for j in 0..m {
        let fc = sc.fv[0][j];
        let mut rk = fc * WGK[10];
        let mut rg = 0.0;
        let mut ra = fc.abs() * WGK[10];
        for k in 0..10 {
            let f1 = sc.fv[1 + 2 * k][j];
            let f2 = sc.fv[2 + 2 * k][j];
            rk += WGK[k] * (f1 + f2);
            ra += WGK[k] * (f1.abs() + f2.abs());
            if k % 2 == 1 {
                rg += WG[k / 2] * (f1 + f2);
            }
        }
        let mean = rk * 0.5;
        let mut asc = WGK[10] * (fc - mean).abs();
        for k in 0..10 {
            asc += WGK[k] * ((sc.fv[1 + 2 * k][j] - mean).abs() + (sc.fv[2 + 2 * k][j] - mean).abs());
        }
        let h = half.abs();
        vals[j] = rk * half;
        absv[j] = ra * h;
        errs[j] = rescale_error((rk - rg) * half, ra * h, asc * h);
    }
    let splittable = (b - a).abs() > 64.0 * f64::EPSILON * center.abs().max(f64::MIN_POSITIVE);
    Ok(Piece { seg: 0, a, b, vals, errs, absv, splittable })
}

/// Adaptive integration of an `m`-component integrand over a union of
/// segments. The integrand writes its components into the output slice.
///
/// Non-finite integrand values abort with [`QuadError::NonFinite`]. Failure to
/// reach the tolerance within `max_intervals` is reported through
/// `converged = false` rather than as an error.
pub fn integrate<F>(mut f: F, segs: &[Segment], m: usize, cfg: &QuadSettings) -> Result<VecIntegral, QuadError>
where
    F: FnMut(f64, &mut [f64]),
{
    let mut sc = Scratch { fv: vec![vec![0.0; m]; 21], buf: vec![0.0; m] };
    let mut pieces: Vec<Piece> = Vec::with_capacity(64);
    for (i, s) in segs.iter().enumerate() {
        let (a, b) = s.param_range();
        if b <= a {
            continue;
        }
        let mut p = kronrod(&mut f, s, a, b, m, &mut sc)?;
        p.seg = i;
        pieces.push(p);
    }

    let totals = |pieces: &[Piece]| {
        let mut v = vec![0.0; m];
        let mut e = vec![0.0; m];
        let mut a = vec![0.0; m];
        for p in pieces {
            for j in 0..m {
                v[j] += p.vals[j];
                e[j] += p.errs[j];
                a[j] += p.absv[j];
            }
        }
        (v, e, a)
    };

    loop {
        let (v, e, a) = totals(&pieces);
        let tol: Vec<f64> = (0..m)
            .map(|j| cfg.abs_tol.max(cfg.rel_tol * v[j].abs()).max(64.0 * f64::EPSILON * a[j]))
            .collect();
        let done = (0..m).all(|j| e[j] <= tol[j]);
        if done || pieces.len() >= cfg.max_intervals {
            let partition = pieces.iter().map(|p| (p.seg, p.a, p.b)).collect();
            return Ok(VecIntegral { values: v, errors: e, abs_values: a, converged: done, partition });
        }
        // bisect the piece with the largest tolerance-normalised error
        let mut worst = None;
        let mut worst_score = 0.0;
        for (i, p) in pieces.iter().enumerate() {
            if !p.splittable {
                continue;
            }
            let score: f64 = (0..m).map(|j| p.errs[j] / tol[j]).fold(0.0, f64::max);
            if score > worst_score {
                worst_score = score;
                worst = Some(i);
            }
        }
        let Some(i) = worst else {
            let partition = pieces.iter().map(|p| (p.seg, p.a, p.b)).collect();
            return Ok(VecIntegral { values: v, errors: e, abs_values: a, converged: false, partition });
        };
        let p = pieces.swap_remove(i);
        let seg = segs[p.seg];
        let mid = 0.5 * (p.a + p.b);
        let mut left = kronrod(&mut f, &seg, p.a, mid, m, &mut sc)?;
        let mut right = kronrod(&mut f, &seg, mid, p.b, m, &mut sc)?;
        left.seg = p.seg;
        right.seg = p.seg;
        pieces.push(left);
        pieces.push(right);
    }
}

/// Scalar convenience wrapper over a finite interval.
pub fn integrate_scalar<F>(f: F, lo: f64, hi: f64, cfg: &QuadSettings) -> Result<(f64, f64), QuadError>
where
    F: Fn(f64) -> f64,
{
    let segs = segments(lo, hi, &[], 0.5 * (lo + hi), 1.0);
    let r = integrate(|x, out| out[0] = f(x), &segs, 1, cfg)?;
    Ok((r.values[0], r.errors[0]))
}

/// Probabilists' Gauss-Hermite rule of order `n`: nodes and weights for
/// `E[φ(Z)]`, `Z ~ N(0, 1)`. Weights sum to one.
pub fn gauss_hermite(n: usize) -> std::sync::Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, std::sync::Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    // Golub-Welsch on the Jacobi matrix of the He_n recurrence
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jm[(k - 1, k)] = b;
        jm[(k, k - 1)] = b;
    }
    let eig = jm.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let rule = std::sync::Arc::new((
        pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
        pairs.iter().map(|p| p.1 / total).collect::<Vec<_>>(),
    ));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}
