//! Versioned JSON run-config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use entropic::dist::{DEFAULT_MC_SAMPLES, DEFAULT_MC_SEED};
use entropic::gaussian::{t_view, TScaling};
use entropic::{Density, ExpectationEngine, Method, Payoff, Prior, SampleCloud};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub prior: PriorSpec,
    /// Coordinate names; defaults to `x` in one dimension and `x1..xN` otherwise.
    #[serde(default)]
    pub variables: Option<Vec<String>>,
    #[serde(default)]
    pub views: Vec<ViewSpec>,
    #[serde(default)]
    pub marginal: Option<MarginalSpec>,
    /// Run with no views at all.
    #[serde(default)]
    pub identity: bool,
    #[serde(default)]
    pub divergence: DivergenceSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub market: Option<MarketSpec>,
    #[serde(default)]
    pub quotes: Vec<QuoteSpec>,
    #[serde(default)]
    pub portfolio: Option<PortfolioSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub truncation: Option<TruncationSpec>,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Gaussian { mean: f64, var: f64 },
    GaussianNd { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Lognormal { mu: f64, sigma2: f64 },
    /// `(log X, log Y)` Gaussian; only the sweep accepts it.
    LognormalNd { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// Terminal price under Black-Scholes dynamics.
    BlackScholes { spot: f64, rate: f64, vol: f64, maturity: f64 },
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    /// Lomax density `(α−1)/(1+x)^α` on `[0, ∞)`.
    Pareto { alpha: f64 },
    StudentT { dof: f64, loc: f64, scale: f64 },
    /// Weighted points read from a CSV with columns `x1..xN,weight`.
    Cloud { path: PathBuf },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    Call {
        strike: f64,
        #[serde(default)]
        var: Option<String>,
        #[serde(default = "one")]
        discount: f64,
    },
    Put {
        strike: f64,
        #[serde(default)]
        var: Option<String>,
        #[serde(default = "one")]
        discount: f64,
    },
    /// `1[lo ≤ x < hi]`
    Indicator {
        lo: f64,
        hi: f64,
        #[serde(default)]
        var: Option<String>,
    },
    Linear {
        coeffs: BTreeMap<String, f64>,
        #[serde(default)]
        offset: f64,
    },
    Power {
        exponent: f64,
        #[serde(default)]
        var: Option<String>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SenseSpec {
    #[default]
    Eq,
    Ge,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub payoff: PayoffSpec,
    pub target: f64,
    #[serde(default)]
    pub sense: SenseSpec,
    #[serde(default)]
    pub weight: Option<f64>,
}

/// Prescribed law of the variables in `on`, plus mean views on others.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub on: Vec<String>,
    pub density: MarginalDensitySpec,
    #[serde(default)]
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalDensitySpec {
    Gaussian { mean: f64, var: f64 },
    GaussianNd { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    StudentT { dof: f64, loc: f64, scale: f64 },
    /// Student-t located at `loc`, scaled from the prior variance of the variable.
    TView {
        dof: f64,
        loc: f64,
        #[serde(default)]
        scaling: ScalingSpec,
    },
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingSpec {
    #[default]
    PriorSd,
    MatchVariance,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceSpec {
    #[default]
    I,
    Polynomial { beta: f64 },
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    #[default]
    Exact,
    Perturbed,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum EngineSpec {
    #[default]
    Auto,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub method: MethodSpec,
    /// Penalty scale `t` of the perturbed problem.
    #[serde(default)]
    pub penalty_t: Option<f64>,
    /// Per-view penalties `t·w_i`; overrides `penalty_t` and view weights.
    #[serde(default)]
    pub tw: Option<Vec<f64>>,
    #[serde(default)]
    pub engine: EngineSpec,
    #[serde(default)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub rate: f64,
    pub maturity: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuoteSpec {
    pub strike: f64,
    pub price: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSpec {
    /// Weight per variable name.
    pub weights: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub notional: f64,
    pub levels: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    200_000
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n: f64,
    pub grid: usize,
    #[serde(default)]
    pub range: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSpec {
    /// Target mean of the truncated tilt.
    pub c: f64,
    pub m_grid: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Strikes to price in `calibrate`; defaults to the quoted strikes.
    #[serde(default)]
    pub strikes: Option<Vec<f64>>,
}

fn bad(field: impl Into<String>, msg: impl Into<String>) -> CliError {
    CliError::Config { field: field.into(), msg: msg.into() }
}

fn matrix(field: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(bad(field, format!("expected a {n}×{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn core(field: &str) -> impl Fn(entropic::Error) -> CliError + '_ {
    move |e| bad(field, e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." || path == "?" { "config".to_string() } else { path };
            bad(field, e.into_inner().to_string())
        })?;
        if cfg.version != SCHEMA_VERSION {
            return Err(bad("version", format!("unsupported schema version {}, expected {SCHEMA_VERSION}", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        match &self.prior {
            PriorSpec::GaussianNd { mean, .. } | PriorSpec::LognormalNd { mean, .. } => mean.len(),
            PriorSpec::Cloud { .. } => self.variables.as_ref().map_or(0, Vec::len),
            _ => 1,
        }
    }

    pub fn names(&self, dim: usize) -> Result<Vec<String>, CliError> {
        match &self.variables {
            Some(v) => {
                if v.len() != dim {
                    return Err(bad("variables", format!("{} names for a {dim}-dimensional prior", v.len())));
                }
                let mut seen = std::collections::BTreeSet::new();
                if let Some(d) = v.iter().find(|n| !seen.insert(n.as_str())) {
                    return Err(bad("variables", format!("duplicate name `{d}`")));
                }
                Ok(v.clone())
            }
            None if dim == 1 => Ok(vec!["x".into()]),
            None => Ok((1..=dim).map(|i| format!("x{i}")).collect()),
        }
    }

    /// Index of variable `name`.
    pub fn resolve(&self, names: &[String], field: &str, name: Option<&str>) -> Result<usize, CliError> {
        match name {
            None if names.len() == 1 => Ok(0),
            None => Err(bad(field, "`var` is required when the prior has several variables")),
            Some(n) => names.iter().position(|v| v == n).ok_or_else(|| bad(field, format!("unknown variable `{n}`"))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_MC_SEED)
    }

    pub fn density(&self) -> Result<Density, CliError> {
        let f = "prior";
        match &self.prior {
            PriorSpec::Gaussian { mean, var } => Density::gaussian(*mean, *var).map_err(core(f)),
            PriorSpec::GaussianNd { mean, cov } => {
                let n = mean.len();
                Density::gaussian_nd(DVector::from_column_slice(mean), matrix("prior.cov", cov, n)?).map_err(core(f))
            }
            PriorSpec::Lognormal { mu, sigma2 } => Density::lognormal(*mu, *sigma2).map_err(core(f)),
            PriorSpec::BlackScholes { spot, rate, vol, maturity } => {
                entropic::calibration::MarketModel::new(*spot, *rate, *vol, *maturity).and_then(|m| m.prior()).map_err(core(f))
            }
            PriorSpec::Exponential { rate } => Density::exponential(*rate).map_err(core(f)),
            PriorSpec::Gamma { shape, rate } => Density::gamma(*shape, *rate).map_err(core(f)),
            PriorSpec::Pareto { alpha } => Density::pareto(*alpha).map_err(core(f)),
            PriorSpec::StudentT { dof, loc, scale } => Density::student_t(*dof, *loc, *scale).map_err(core(f)),
            PriorSpec::LognormalNd { .. } => Err(bad("prior.type", "lognormal_nd priors are only supported by `sweep`")),
            PriorSpec::Cloud { .. } => Err(bad("prior.type", "this command needs an analytic prior, not a cloud")),
        }
    }

    pub fn prior(&self) -> Result<Prior, CliError> {
        match &self.prior {
            PriorSpec::Cloud { path } => {
                let p = self.base_dir.join(path);
                let file = std::fs::File::open(&p).map_err(|e| bad("prior.path", format!("{}: {e}", p.display())))?;
                let cloud = SampleCloud::read_csv(file).map_err(core("prior.path"))?;
                Ok(Prior::Cloud(cloud))
            }
            _ => Ok(Prior::Density(self.density()?)),
        }
    }

    pub fn engine(&self, dim: usize) -> Result<ExpectationEngine, CliError> {
        let samples = self.solver.samples.unwrap_or(DEFAULT_MC_SAMPLES);
        if samples == 0 {
            return Err(bad("solver.samples", "must be positive"));
        }
        let mc = Method::MonteCarlo { seed: self.seed(), n_samples: samples };
        let method = match self.solver.engine {
            EngineSpec::Auto if dim >= 3 => mc,
            EngineSpec::Auto => Method::Auto,
            EngineSpec::Quadrature if dim >= 3 => return Err(bad("solver.engine", "quadrature supports at most two dimensions")),
            EngineSpec::Quadrature => Method::Auto,
            EngineSpec::MonteCarlo => mc,
        };
        Ok(ExpectationEngine { method, ..ExpectationEngine::default() })
    }

    pub fn beta(&self) -> Option<f64> {
        match self.divergence {
            DivergenceSpec::I => None,
            DivergenceSpec::Polynomial { beta } => Some(beta),
        }
    }

    pub fn check_beta(&self) -> Result<(), CliError> {
        match self.beta() {
            Some(b) if !(b > 0.0 && b.is_finite()) => Err(bad("divergence.beta", format!("must be positive, got {b}"))),
            _ => Ok(()),
        }
    }

    pub fn payoff(&self, names: &[String], field: &str, spec: &PayoffSpec) -> Result<Payoff, CliError> {
        let var = |v: &Option<String>| self.resolve(names, &format!("{field}.var"), v.as_deref());
        Ok(match spec {
            PayoffSpec::Call { strike, var: v, discount } => Payoff::Call { strike: *strike, discount: *discount, coord: var(v)? },
            PayoffSpec::Put { strike, var: v, discount } => Payoff::Put { strike: *strike, discount: *discount, coord: var(v)? },
            PayoffSpec::Indicator { lo, hi, var: v } => {
                if !(lo < hi) {
                    return Err(bad(format!("{field}.hi"), "must exceed `lo`"));
                }
                Payoff::Indicator { lo: *lo, hi: *hi, coord: var(v)? }
            }
            PayoffSpec::Linear { coeffs, offset } => {
                let mut c = vec![0.0; names.len()];
                for (name, v) in coeffs {
                    c[self.resolve(names, &format!("{field}.coeffs"), Some(name))?] = *v;
                }
                Payoff::Linear { coeffs: c, offset: *offset }
            }
            PayoffSpec::Power { exponent, var: v } => Payoff::Power { exponent: *exponent, coord: var(v)? },
        })
    }

    /// Rate and maturity for discounting, from `market` or a Black-Scholes prior.
    pub fn market(&self) -> Result<MarketSpec, CliError> {
        match (&self.market, &self.prior) {
            (Some(m), _) => Ok(*m),
            (None, PriorSpec::BlackScholes { rate, maturity, .. }) => Ok(MarketSpec { rate: *rate, maturity: *maturity }),
            _ => Err(bad("market", "required unless the prior is black_scholes")),
        }
    }

    /// Law of the marginal block, given the prior variance of its variable.
    pub fn marginal_density(&self, spec: &MarginalSpec, prior_var: &DMatrix<f64>) -> Result<Density, CliError> {
        let f = "marginal.density";
        let p = spec.on.len();
        let d = match &spec.density {
            MarginalDensitySpec::Gaussian { mean, var } => Density::gaussian(*mean, *var).map_err(core(f))?,
            MarginalDensitySpec::GaussianNd { mean, cov } => {
                Density::gaussian_nd(DVector::from_column_slice(mean), matrix("marginal.density.cov", cov, mean.len())?).map_err(core(f))?
            }
            MarginalDensitySpec::StudentT { dof, loc, scale } => Density::student_t(*dof, *loc, *scale).map_err(core(f))?,
            MarginalDensitySpec::TView { dof, loc, scaling } => {
                if p != 1 {
                    return Err(bad(f, "t_view needs exactly one marginal variable"));
                }
                let s = match scaling {
                    ScalingSpec::PriorSd => TScaling::PriorSd,
                    ScalingSpec::MatchVariance => TScaling::MatchVariance,
                };
                t_view(*dof, *loc, prior_var[(0, 0)], s).map_err(core(f))?
            }
        };
        if d.dim() != p {
            return Err(bad(f, format!("density has dimension {}, `marginal.on` lists {p} variables", d.dim())));
        }
        Ok(d)
    }
}
