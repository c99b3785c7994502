use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use entropic_cli::{run, CliError, Command, Outcome, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "entropic", version, about = "Minimum-divergence posterior updates from a JSON run-config")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit call quotes and price a strike ladder.
    Calibrate(Common),
    /// Moment or marginal views on a general prior.
    Update(Common),
    /// Gaussian prior with a prescribed marginal, in closed form.
    Markowitz(Common),
    /// Markowitz update followed by portfolio VaR.
    Var(Common),
    /// Attainable mean ratios of two-view polynomial tilts.
    Sweep(Common),
    /// Multipliers and divergences of truncated Pareto tilts.
    DiagnoseTruncation(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Use the polynomial divergence of this order.
    #[arg(long, value_name = "X")]
    beta: Option<f64>,
    /// Solve the perturbed problem with this penalty scale.
    #[arg(long = "penalty-t", value_name = "X")]
    penalty_t: Option<f64>,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

fn execute(cmd: Command, args: &Common) -> Result<Outcome, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    Overrides { seed: args.seed, beta: args.beta, penalty_t: args.penalty_t }.apply(&mut cfg);
    let out = run(cmd, &cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    for (name, text) in &out.files {
        write(&args.out, name, text)?;
    }
    if let Some(s) = &out.summary {
        let json = s.to_json();
        write(&args.out, "summary.json", &json)?;
        print!("{json}");
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Cmd::Calibrate(a) => (Command::Calibrate, a),
        Cmd::Update(a) => (Command::Update, a),
        Cmd::Markowitz(a) => (Command::Markowitz, a),
        Cmd::Var(a) => (Command::Var, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::DiagnoseTruncation(a) => (Command::DiagnoseTruncation, a),
    };
    match execute(cmd, args) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(m) = out.summary.as_ref().and_then(|s| s.message.as_ref()) {
                eprintln!("error: {m}");
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
