//! One function per subcommand. Each returns the files to write and an
//! optional posterior summary.

use entropic::calibration::price_calls;
use entropic::gaussian::{markowitz_update, var_estimate, GaussianPrior, MarkowitzPosterior};
use entropic::marginal::{lift_views, solve_marginal_i_with, solve_marginal_poly_with, ChangeOfVariables, ConditionalTilt, MarginalView};
use entropic::sweep::{feasibility_sweep, SweepPrior};
use entropic::tilt::{solve_i_divergence_with, solve_polynomial_with, truncated_pareto_diagnostic};
use entropic::wls::solve_perturbed;
use entropic::{ConstraintSet, Density, Error, ExpectationEngine, Payoff, Prior, Sense, SolverOptions, TiltedPosterior};
use nalgebra::{DMatrix, DVector};

use crate::config::{MethodSpec, PriorSpec, RunConfig, SenseSpec};
use crate::output::{exact, price, Summary, Table};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Calibrate,
    Update,
    Markowitz,
    Var,
    Sweep,
    DiagnoseTruncation,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Update => "update",
            Command::Markowitz => "markowitz",
            Command::Var => "var",
            Command::Sweep => "sweep",
            Command::DiagnoseTruncation => "diagnose-truncation",
        }
    }
}

/// Command-line settings that take precedence over the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub penalty_t: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(b) = self.beta {
            cfg.divergence = crate::config::DivergenceSpec::Polynomial { beta: b };
        }
        if let Some(t) = self.penalty_t {
            cfg.solver.penalty_t = Some(t);
            cfg.solver.tw = None;
            cfg.solver.method = MethodSpec::Perturbed;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub summary: Option<Summary>,
    /// `(file name, contents)`
    pub files: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match &self.summary {
            Some(s) if s.is_failure() => 1,
            _ => 0,
        }
    }
}

fn bad(field: impl Into<String>, msg: impl Into<String>) -> CliError {
    CliError::Config { field: field.into(), msg: msg.into() }
}

/// Solver errors that describe the views rather than the config.
fn failure_status(e: &Error) -> Option<&'static str> {
    match e {
        Error::Infeasible(_) | Error::RootNotBracketed { .. } => Some("Infeasible"),
        Error::DivergentIntegral(_) | Error::NotAbsolutelyContinuous | Error::DegenerateWeights => Some("DivergentIntegral"),
        _ => None,
    }
}

fn solver_error(field: &str) -> impl Fn(Error) -> CliError + '_ {
    move |e| match failure_status(&e) {
        Some(_) => CliError::Solver(e.to_string()),
        None => bad(field, e.to_string()),
    }
}

/// Turns a solve error into a failed summary when it concerns the views.
fn settle<T>(cmd: Command, beta: Option<f64>, r: Result<T, Error>) -> Result<Result<T, Outcome>, CliError> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e) => match failure_status(&e) {
            Some(status) => {
                Ok(Err(Outcome { summary: Some(Summary::failed(cmd.as_str(), beta, status, e.to_string())), ..Outcome::default() }))
            }
            None => Err(bad("config", e.to_string())),
        },
    }
}

fn options(cfg: &RunConfig) -> Result<SolverOptions, CliError> {
    let mut o = SolverOptions::default();
    if let Some(t) = cfg.solver.tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(bad("solver.tol", format!("must be positive, got {t}")));
        }
        o.tol = Some(t);
    }
    if let Some(m) = cfg.solver.max_iter {
        if m == 0 {
            return Err(bad("solver.max_iter", "must be positive"));
        }
        o.max_iter = m;
    }
    Ok(o)
}

/// `(t, w)` of the perturbed problem for `k` views with optional relative weights.
fn penalties(cfg: &RunConfig, k: usize, weights: Option<Vec<f64>>) -> Result<(f64, Vec<f64>), CliError> {
    if let Some(tw) = &cfg.solver.tw {
        if tw.len() != k {
            return Err(bad("solver.tw", format!("expected {k} entries, got {}", tw.len())));
        }
        if tw.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(bad("solver.tw", "entries must be positive"));
        }
        let t: f64 = tw.iter().sum();
        return Ok((t, tw.iter().map(|v| v / t).collect()));
    }
    let t = cfg.solver.penalty_t.ok_or_else(|| bad("solver.penalty_t", "the perturbed method needs `penalty_t` or `tw`"))?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(bad("solver.penalty_t", format!("must be positive, got {t}")));
    }
    Ok((t, weights.unwrap_or_else(|| vec![1.0 / k as f64; k])))
}

fn require_beta(cfg: &RunConfig, what: &str) -> Result<f64, CliError> {
    cfg.beta().ok_or_else(|| bad("divergence", format!("{what} needs the polynomial divergence")))
}

fn divergence_of(post: &TiltedPosterior, beta: Option<f64>, eng: &ExpectationEngine) -> Result<f64, Error> {
    Ok(match beta {
        None => post.i_divergence(eng)?.value,
        Some(b) => centred(post.polynomial_divergence(b, eng)?.value, b),
    })
}

/// `(∫ L^{β+1} dμ − 1) / β`, zero at the prior and the I-divergence as `β → 0`.
fn centred(i_beta: f64, beta: f64) -> f64 {
    (i_beta - 1.0) / beta
}

fn summary(cmd: Command, lambda: Vec<f64>, beta: Option<f64>, divergence: f64, residuals: Vec<f64>, status: &str) -> Summary {
    Summary {
        version: crate::config::SCHEMA_VERSION,
        command: cmd.as_str().into(),
        lambda,
        beta,
        divergence: divergence.is_finite().then_some(divergence),
        residuals,
        status: status.into(),
        message: None,
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.check_beta()?;
    match cmd {
        Command::Calibrate => calibrate(cfg),
        Command::Update => update(cfg),
        Command::Markowitz | Command::Var => markowitz(cmd, cfg),
        Command::Sweep => sweep(cfg),
        Command::DiagnoseTruncation => truncation(cfg),
    }
}

/// Residuals of the posterior recorded in `summary`, rebuilt from its multipliers.
pub fn reevaluate(cmd: Command, cfg: &RunConfig, summary: &Summary) -> Result<Vec<f64>, CliError> {
    if summary.is_failure() {
        return Err(bad("summary.status", format!("nothing to re-evaluate for status {}", summary.status)));
    }
    let lambda = summary.lambda.clone();
    match cmd {
        Command::Calibrate => {
            let (prior, cs, discount, eng) = calibration_problem(cfg)?;
            let post = tilt_from(prior, &cs, lambda, summary.beta, &eng)?;
            let strikes: Vec<f64> = cfg.quotes.iter().map(|q| q.strike).collect();
            let fitted = price_calls(&post, &strikes, discount, &eng).map_err(solver_error("quotes"))?;
            Ok(fitted.iter().zip(&cfg.quotes).map(|(p, q)| (p - q.price).abs()).collect())
        }
        Command::Update if cfg.marginal.is_some() => {
            let (prior, view, _, eng) = marginal_problem(cfg)?;
            let post = ConditionalTilt::from_lambda(&prior, &view, lambda, &eng).map_err(solver_error("summary.lambda"))?;
            Ok(post.moments().iter().zip(&view.c).map(|(a, c)| (a - c).abs()).collect())
        }
        Command::Update => {
            let (prior, cs, eng) = view_problem(cfg)?;
            let post = tilt_from(prior, &cs, lambda.clone(), summary.beta, &eng)?;
            let achieved = post.moments(&eng).map_err(solver_error("views"))?;
            Ok(moment_residuals(&cs, &achieved, &lambda))
        }
        Command::Markowitz | Command::Var => {
            let (gp, g, a, _) = gaussian_problem(cfg)?;
            let post = markowitz_update(&gp, &g, &a).map_err(solver_error("marginal"))?;
            if lambda.len() != gp.dim_y() {
                return Err(bad("summary.lambda", format!("expected {} multipliers", gp.dim_y())));
            }
            let lam = DVector::from_vec(lambda);
            let achieved = &gp.mu_y + &post.cond_mean_slope * (&post.g_mean - &gp.mu_x) + &post.cond_cov * lam;
            Ok((achieved - a).iter().map(|v| v.abs()).collect())
        }
        Command::Sweep | Command::DiagnoseTruncation => Err(bad("command", format!("`{}` emits no posterior", cmd.as_str()))),
    }
}

fn tilt_from(prior: Prior, cs: &ConstraintSet, lambda: Vec<f64>, beta: Option<f64>, eng: &ExpectationEngine) -> Result<TiltedPosterior, CliError> {
    if lambda.len() != cs.k() {
        return Err(bad("summary.lambda", format!("expected {} multipliers, got {}", cs.k(), lambda.len())));
    }
    if lambda.is_empty() {
        return Ok(TiltedPosterior::identity(prior));
    }
    match beta {
        None => TiltedPosterior::exponential(prior, cs.g().to_vec(), lambda, eng),
        Some(b) => TiltedPosterior::polynomial(prior, cs.g().to_vec(), lambda, b, eng),
    }
    .map_err(solver_error("summary.lambda"))
}

/// `|achieved − c|`, or the shortfall for inequality views whose multiplier is zero.
fn moment_residuals(cs: &ConstraintSet, achieved: &[f64], lambda: &[f64]) -> Vec<f64> {
    (0..cs.k())
        .map(|i| {
            let (a, c) = (achieved[i], cs.c()[i]);
            if cs.sense()[i] == Sense::Geq && lambda.get(i).is_some_and(|l| *l == 0.0) {
                (c - a).max(0.0)
            } else {
                (a - c).abs()
            }
        })
        .collect()
}

// calibrate

fn calibration_problem(cfg: &RunConfig) -> Result<(Prior, ConstraintSet, f64, ExpectationEngine), CliError> {
    let density = cfg.density()?;
    if density.dim() != 1 {
        return Err(bad("prior", "calibration needs a one-dimensional price law"));
    }
    if !cfg.views.is_empty() || cfg.marginal.is_some() {
        return Err(bad("views", "calibrate takes its views from `quotes`"));
    }
    if cfg.quotes.is_empty() && !cfg.identity {
        return Err(bad("quotes", "at least one quote is required (or set `identity`)"));
    }
    if cfg.identity && !cfg.quotes.is_empty() {
        return Err(bad("identity", "an identity run takes no quotes"));
    }
    let m = cfg.market()?;
    if !(m.maturity > 0.0 && m.rate.is_finite()) {
        return Err(bad("market", "maturity must be positive and the rate finite"));
    }
    let discount = (-m.rate * m.maturity).exp();
    for (i, q) in cfg.quotes.iter().enumerate() {
        if !(q.strike.is_finite() && q.price.is_finite() && q.price >= 0.0) {
            return Err(bad(format!("quotes[{i}]"), "strike and price must be finite, price nonnegative"));
        }
    }
    // views on undiscounted payoffs, so multipliers act on (x − K)^+ directly
    let g = cfg.quotes.iter().map(|q| Payoff::call(q.strike, 1.0)).collect();
    let c = cfg.quotes.iter().map(|q| q.price / discount).collect();
    let cs = ConstraintSet::equalities(g, c).map_err(|e| bad("quotes", e.to_string()))?;
    Ok((Prior::Density(density), cs, discount, cfg.engine(1)?))
}

fn calibrate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let cmd = Command::Calibrate;
    let (prior, cs, discount, eng) = calibration_problem(cfg)?;
    let beta = cfg.beta();
    let opts = options(cfg)?;
    let solved = match cfg.solver.method {
        _ if cs.is_empty() => Ok((TiltedPosterior::identity(prior.clone()), "Converged", 0.0)),
        MethodSpec::Exact => {
            let r = match beta {
                None => solve_i_divergence_with(&prior, &cs, &eng, &opts),
                Some(b) => solve_polynomial_with(&prior, &cs, b, &eng, &opts),
            };
            r.and_then(|(post, rep)| Ok((divergence_of(&post, beta, &eng)?, post, rep.status.as_str())))
                .map(|(d, post, s)| (post, s, d))
        }
        MethodSpec::Perturbed => {
            let b = require_beta(cfg, "the perturbed method")?;
            let (t, w) = penalties(cfg, cs.k(), None)?;
            let cs = ConstraintSet::new(cs.g().to_vec(), cs.c().to_vec(), vec![Sense::Equality; cs.k()], Some(w))
                .map_err(|e| bad("solver.tw", e.to_string()))?;
            solve_perturbed(&prior, &cs, b, t, &eng)
                .map(|s| (s.posterior, if s.lambda_capped { "NotStronglyFeasible" } else { "Converged" }, centred(s.divergence, b)))
        }
    };
    let (post, status, divergence) = match settle(cmd, beta, solved)? {
        Ok(v) => v,
        Err(failed) => return Ok(failed),
    };
    let strikes = cfg.outputs.strikes.clone().unwrap_or_else(|| cfg.quotes.iter().map(|q| q.strike).collect());
    let base = TiltedPosterior::identity(prior.clone());
    let prior_prices = price_calls(&base, &strikes, discount, &eng).map_err(solver_error("outputs.strikes"))?;
    let post_prices = price_calls(&post, &strikes, discount, &eng).map_err(solver_error("outputs.strikes"))?;
    let quoted: Vec<f64> = cfg.quotes.iter().map(|q| q.strike).collect();
    let fitted = price_calls(&post, &quoted, discount, &eng).map_err(solver_error("quotes"))?;
    let residuals = fitted.iter().zip(&cfg.quotes).map(|(p, q)| (p - q.price).abs()).collect();

    let mut table = Table::new(&["strike", "prior", "posterior"]);
    for ((k, p), q) in strikes.iter().zip(&prior_prices).zip(&post_prices) {
        table.row([exact(*k), price(*p), price(*q)]);
    }
    let s = summary(cmd, post.lambda().to_vec(), beta, divergence, residuals, status);
    Ok(Outcome { summary: Some(s), files: vec![("prices.csv".into(), table.finish())], warnings: vec![] })
}

// update

fn view_problem(cfg: &RunConfig) -> Result<(Prior, ConstraintSet, ExpectationEngine), CliError> {
    let prior = cfg.prior()?;
    let names = cfg.names(prior.dim())?;
    if cfg.views.is_empty() && !cfg.identity {
        return Err(bad("views", "at least one view is required (or set `identity`)"));
    }
    if cfg.identity && !cfg.views.is_empty() {
        return Err(bad("identity", "an identity run takes no views"));
    }
    let mut g = Vec::with_capacity(cfg.views.len());
    let mut seen_eq = false;
    for (i, v) in cfg.views.iter().enumerate() {
        let field = format!("views[{i}]");
        if v.sense == SenseSpec::Ge && seen_eq {
            return Err(bad(format!("{field}.sense"), "inequality views must precede equalities"));
        }
        seen_eq |= v.sense == SenseSpec::Eq;
        if !v.target.is_finite() {
            return Err(bad(format!("{field}.target"), "must be finite"));
        }
        g.push(cfg.payoff(&names, &format!("{field}.payoff"), &v.payoff)?);
    }
    let c = cfg.views.iter().map(|v| v.target).collect();
    let sense = cfg.views.iter().map(|v| if v.sense == SenseSpec::Ge { Sense::Geq } else { Sense::Equality }).collect();
    let weights = view_weights(cfg)?;
    let cs = ConstraintSet::new(g, c, sense, weights).map_err(|e| bad("views", e.to_string()))?;
    Ok((prior, cs, cfg.engine(names.len())?))
}

/// Relative view weights normalised to sum to one; all or none must be given.
fn view_weights(cfg: &RunConfig) -> Result<Option<Vec<f64>>, CliError> {
    let given: Vec<Option<f64>> = cfg.views.iter().map(|v| v.weight).collect();
    if given.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut w = Vec::with_capacity(given.len());
    for (i, v) in given.iter().enumerate() {
        match v {
            Some(x) if *x > 0.0 && x.is_finite() => w.push(*x),
            Some(_) => return Err(bad(format!("views[{i}].weight"), "must be positive")),
            None => return Err(bad(format!("views[{i}].weight"), "weights must be given for every view or none")),
        }
    }
    let s: f64 = w.iter().sum();
    Ok(Some(w.iter().map(|v| v / s).collect()))
}

fn update(cfg: &RunConfig) -> Result<Outcome, CliError> {
    if cfg.marginal.is_some() {
        return update_marginal(cfg);
    }
    let cmd = Command::Update;
    let (prior, cs, eng) = view_problem(cfg)?;
    let beta = cfg.beta();
    let opts = options(cfg)?;
    let solved = match cfg.solver.method {
        MethodSpec::Exact => {
            let r = match beta {
                None => solve_i_divergence_with(&prior, &cs, &eng, &opts),
                Some(b) => solve_polynomial_with(&prior, &cs, b, &eng, &opts),
            };
            r.and_then(|(post, rep)| {
                let d = divergence_of(&post, beta, &eng)?;
                Ok((post, rep.status.as_str(), d, rep.residuals))
            })
        }
        MethodSpec::Perturbed => {
            let b = require_beta(cfg, "the perturbed method")?;
            if cs.k1() > 0 {
                return Err(bad("views", "the perturbed method takes equality views only"));
            }
            let (t, w) = penalties(cfg, cs.k(), Some(cs.weights().to_vec()))?;
            let cs = ConstraintSet::new(cs.g().to_vec(), cs.c().to_vec(), cs.sense().to_vec(), Some(w)).map_err(|e| bad("solver.tw", e.to_string()))?;
            solve_perturbed(&prior, &cs, b, t, &eng).map(|s| {
                let r = s.y.iter().map(|v| v.abs()).collect();
                (s.posterior, if s.lambda_capped { "NotStronglyFeasible" } else { "Converged" }, centred(s.divergence, b), r)
            })
        }
    };
    let (post, status, divergence, residuals) = match settle(cmd, beta, solved)? {
        Ok(v) => v,
        Err(failed) => return Ok(failed),
    };
    let achieved = post.moments_of(cs.g(), &eng).map_err(solver_error("views"))?;
    let mut table = Table::new(&["view", "target", "achieved", "residual"]);
    for i in 0..cs.k() {
        table.row([i.to_string(), exact(cs.c()[i]), exact(achieved[i]), exact(residuals[i])]);
    }
    let s = summary(cmd, post.lambda().to_vec(), beta, divergence, residuals, status);
    Ok(Outcome { summary: Some(s), files: vec![("views.csv".into(), table.finish())], warnings: vec![] })
}

/// Prior moved so that the marginal block leads, the view on it, and variable names per view.
fn marginal_problem(cfg: &RunConfig) -> Result<(Prior, MarginalView, Vec<String>, ExpectationEngine), CliError> {
    let spec = cfg.marginal.as_ref().expect("marginal block");
    if !cfg.views.is_empty() {
        return Err(bad("views", "moment views cannot be combined with a marginal block; use `marginal.means`"));
    }
    let density = cfg.density()?;
    let names = cfg.names(density.dim())?;
    if spec.on.is_empty() {
        return Err(bad("marginal.on", "lists no variables"));
    }
    let on = spec.on.iter().map(|n| cfg.resolve(&names, "marginal.on", Some(n))).collect::<Result<Vec<_>, _>>()?;
    let mut means = spec
        .means
        .iter()
        .map(|(n, v)| Ok((cfg.resolve(&names, "marginal.means", Some(n))?, n.clone(), *v)))
        .collect::<Result<Vec<_>, CliError>>()?;
    means.sort_by_key(|m| m.0);
    if let Some(m) = means.iter().find(|m| on.contains(&m.0)) {
        return Err(bad("marginal.means", format!("`{}` already has a prescribed marginal", m.1)));
    }
    let x_var = match density.gaussian_params() {
        Some((_, s)) => DMatrix::from_fn(on.len(), on.len(), |i, j| s[(on[i], on[j])]),
        None => DMatrix::zeros(on.len(), on.len()),
    };
    let g = cfg.marginal_density(spec, &x_var)?;
    let idx: Vec<usize> = means.iter().map(|m| m.0).collect();
    let targets = means.iter().map(|m| m.2).collect();
    let (prior, view, _) = lift_views(&ChangeOfVariables::identity(names.len()), &density, g, &on, &idx, targets, cfg.beta())
        .map_err(|e| bad("marginal", e.to_string()))?;
    let eng = cfg.engine(names.len())?;
    Ok((prior.into(), view, means.into_iter().map(|m| m.1).collect(), eng))
}

fn update_marginal(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let cmd = Command::Update;
    let (prior, view, names, eng) = marginal_problem(cfg)?;
    let opts = options(cfg)?;
    let beta = cfg.beta();
    if cfg.solver.method == MethodSpec::Perturbed {
        return Err(bad("solver.method", "marginal views are solved exactly"));
    }
    let solved = match beta {
        None => solve_marginal_i_with(&prior, &view, &eng, &opts).map(|(p, r)| (p.i_divergence(), p, r)),
        Some(b) => solve_marginal_poly_with(&prior, &view, &eng, &opts).map(|(p, r)| (centred(p.polynomial_divergence(b), b), p, r)),
    };
    let (divergence, post, rep) = match settle(cmd, beta, solved)? {
        Ok(v) => v,
        Err(failed) => return Ok(failed),
    };
    let achieved = post.moments();
    let mut table = Table::new(&["variable", "target", "achieved", "residual"]);
    for (i, n) in names.iter().enumerate() {
        table.row([n.clone(), exact(view.c[i]), exact(achieved[i]), exact(rep.residuals[i])]);
    }
    let s = summary(cmd, post.lambda().to_vec(), beta, divergence, rep.residuals, rep.status.as_str());
    Ok(Outcome { summary: Some(s), files: vec![("views.csv".into(), table.finish())], warnings: vec![] })
}

// markowitz and var

/// Split prior, marginal law, `E[Y]` targets and the names in `(X, Y)` order.
fn gaussian_problem(cfg: &RunConfig) -> Result<(GaussianPrior, Density, DVector<f64>, Vec<String>), CliError> {
    let PriorSpec::GaussianNd { .. } = &cfg.prior else {
        return Err(bad("prior.type", "markowitz updates need a gaussian_nd prior"));
    };
    let spec = cfg.marginal.as_ref().ok_or_else(|| bad("marginal", "a marginal block is required"))?;
    if !cfg.views.is_empty() {
        return Err(bad("views", "use `marginal.means` for views on Y"));
    }
    let density = cfg.density()?;
    let names = cfg.names(density.dim())?;
    let on = spec.on.iter().map(|n| cfg.resolve(&names, "marginal.on", Some(n))).collect::<Result<Vec<_>, _>>()?;
    let (mean, cov) = density.gaussian_params().expect("gaussian prior");
    let gp = GaussianPrior::new(mean.clone(), cov.clone(), &on).map_err(|e| bad("marginal.on", e.to_string()))?;
    let mut order = on.clone();
    order.extend((0..names.len()).filter(|i| !on.contains(i)));
    let ordered: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
    let y_names = &ordered[on.len()..];
    let mut a = gp.mu_y.clone();
    for (n, v) in &spec.means {
        match y_names.iter().position(|y| y == n) {
            Some(j) => a[j] = *v,
            None if ordered.contains(n) => return Err(bad("marginal.means", format!("`{n}` already has a prescribed marginal"))),
            None => return Err(bad("marginal.means", format!("unknown variable `{n}`"))),
        }
    }
    let g = cfg.marginal_density(spec, &gp.sigma_xx)?;
    Ok((gp, g, a, ordered))
}

/// `D(g ‖ f_X) + ½ λᵀ Σ_{y|x} λ`
fn markowitz_divergence(gp: &GaussianPrior, post: &MarkowitzPosterior, eng: &ExpectationEngine) -> Result<f64, Error> {
    let g = &post.g_marginal;
    let fx = gp.x_marginal()?;
    let marginal = if g.is_gaussian() && g.gaussian_params() == fx.gaussian_params() {
        0.0
    } else {
        eng.expectation(g, &|x| g.ln_pdf(x) - fx.ln_pdf(x))?.value()
    };
    Ok(marginal + 0.5 * post.lambda.dot(&(&post.cond_cov * &post.lambda)))
}

fn markowitz(cmd: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    if cfg.beta().is_some() {
        return Err(bad("divergence", "markowitz updates use the I-divergence"));
    }
    let (gp, g, a, names) = gaussian_problem(cfg)?;
    let eng = cfg.engine(gp.dim_x())?;
    let post = match settle(cmd, None, markowitz_update(&gp, &g, &a))? {
        Ok(p) => p,
        Err(failed) => return Ok(failed),
    };
    let divergence = match settle(cmd, None, markowitz_divergence(&gp, &post, &eng))? {
        Ok(d) => d,
        Err(failed) => return Ok(failed),
    };
    let achieved = &post.cond_mean_intercept + &post.cond_mean_slope * &post.g_mean;
    let residuals: Vec<f64> = (&achieved - &a).iter().map(|v| v.abs()).collect();
    let (p, q) = (gp.dim_x(), gp.dim_y());
    let mut header = vec!["variable".to_string(), "intercept".to_string()];
    header.extend(names[..p].iter().map(|n| format!("slope_{n}")));
    header.extend(names[p..].iter().map(|n| format!("cov_{n}")));
    let mut table = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..q {
        let mut row = vec![names[p + i].clone(), exact(post.cond_mean_intercept[i])];
        row.extend((0..p).map(|j| exact(post.cond_mean_slope[(i, j)])));
        row.extend((0..q).map(|j| exact(post.cond_cov[(i, j)])));
        table.row(row);
    }
    let mut files = vec![("conditional.csv".to_string(), table.finish())];
    if cmd == Command::Var {
        files.push(("var.csv".into(), var_table(cfg, &gp, &post, &names)?));
    }
    let s = summary(cmd, post.lambda.iter().copied().collect(), None, divergence, residuals, "Converged");
    Ok(Outcome { summary: Some(s), files, warnings: vec![] })
}

fn var_table(cfg: &RunConfig, gp: &GaussianPrior, post: &MarkowitzPosterior, names: &[String]) -> Result<String, CliError> {
    let pf = cfg.portfolio.as_ref().ok_or_else(|| bad("portfolio", "`var` needs a portfolio block"))?;
    let mut w = vec![0.0; names.len()];
    for (n, v) in &pf.weights {
        let i = names.iter().position(|m| m == n).ok_or_else(|| bad("portfolio.weights", format!("unknown variable `{n}`")))?;
        w[i] = *v;
    }
    if pf.levels.is_empty() {
        return Err(bad("portfolio.levels", "lists no confidence levels"));
    }
    let fx = gp.x_marginal().map_err(|e| bad("prior", e.to_string()))?;
    let base = markowitz_update(gp, &fx, &gp.mu_y).map_err(|e| bad("prior", e.to_string()))?;
    let seed = cfg.seed();
    let run = |m: &MarkowitzPosterior| var_estimate(m, &w, pf.notional, &pf.levels, pf.samples, seed).map_err(|e| bad("portfolio", e.to_string()));
    let (prior_var, post_var) = (run(&base)?, run(post)?);
    let mut table = Table::new(&["level", "prior", "posterior"]);
    for ((l, a), (_, b)) in prior_var.iter().zip(&post_var) {
        table.row([exact(*l), price(*a), price(*b)]);
    }
    Ok(table.finish())
}

// sweep and truncation

fn sweep(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = cfg.sweep.ok_or_else(|| bad("sweep", "`sweep` needs a sweep block"))?;
    let prior = match &cfg.prior {
        PriorSpec::LognormalNd { mean, cov } => {
            if mean.len() != 2 || cov.len() != 2 || cov.iter().any(|r| r.len() != 2) {
                return Err(bad("prior", "the sweep needs a bivariate prior"));
            }
            SweepPrior::lognormal([mean[0], mean[1]], [[cov[0][0], cov[0][1]], [cov[1][0], cov[1][1]]]).map_err(|e| bad("prior.cov", e.to_string()))?
        }
        _ => SweepPrior::Density(cfg.density()?),
    };
    let eng = cfg.engine(2)?;
    let r = feasibility_sweep(&prior, spec.n, spec.grid, spec.range, &eng).map_err(|e| bad("sweep", e.to_string()))?;
    let mut table = Table::new(&["lambda", "xi", "a", "b"]);
    for p in &r.points {
        table.row([exact(p.lambda), exact(p.xi), exact(p.a), exact(p.b)]);
    }
    let warnings = if r.skipped > 0 { vec![format!("{} grid points skipped: divergent expectations", r.skipped)] } else { vec![] };
    Ok(Outcome { summary: None, files: vec![("sweep.csv".into(), table.finish())], warnings })
}

fn truncation(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let PriorSpec::Pareto { alpha } = cfg.prior else {
        return Err(bad("prior.type", "the truncation diagnostic needs a pareto prior"));
    };
    let spec = cfg.truncation.as_ref().ok_or_else(|| bad("truncation", "`diagnose-truncation` needs a truncation block"))?;
    let pts = truncated_pareto_diagnostic(alpha, spec.c, &spec.m_grid).map_err(|e| bad("truncation", e.to_string()))?;
    let mut table = Table::new(&["m", "lambda", "kl"]);
    for p in &pts {
        table.row([exact(p.m), exact(p.lambda), exact(p.kl)]);
    }
    Ok(Outcome { summary: None, files: vec![("truncation.csv".into(), table.finish())], warnings: vec![] })
}
