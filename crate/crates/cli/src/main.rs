//! `polylab`: run directed-polymer experiments from a TOML config and
//! command line overrides.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polylab::harness::io::{config_from_summary, payload_from_summary, SUMMARY_FILE};
use polylab::harness::{run, ExperimentConfig, ExperimentKind, RunOutput};
use polylab::Error;

const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "polylab", version, about = "Directed polymer Monte Carlo laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ensemble of Z_n at the origin.
    Simulate(RunArgs),
    /// Log-log slopes of sd S_n(f) and sd K_n(f).
    Exponent(RunArgs),
    /// Empirical P(Z_n <= 1/u) and its decay fits.
    Tail(RunArgs),
    /// Mean replica overlap against n.
    Overlap(RunArgs),
    /// E[Z_n^p] against n and a p* proxy.
    Moments(RunArgs),
    /// |S_n(f) - K_n(f)| against |S_n(f)| and |K_n(f)|.
    Compare(RunArgs),
    /// Covariance of increment statistics against separation.
    Covariance(RunArgs),
    /// Martingale and previsible parts of log Z_k increments.
    Doob(RunArgs),
    /// Moment ratios of U = Σ a_i (η_i - 1).
    AppendixPhi(RunArgs),
    /// Rerun the config embedded in a summary.json and compare results.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for samples.csv, aggregate.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// First seed of the measurement block.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// gaussian, rademacher, bernoulli or uniform (the last two need
    /// parameters from the config file).
    #[arg(long)]
    family: Option<String>,
    /// Comma separated horizons, e.g. 16,32,64.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    delta: Option<f64>,
    /// Exit with status 4 if any built-in check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct RerunArgs {
    /// A summary.json, or the directory holding one.
    summary: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Where to write the rerun artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 4 if the rerun differs.
    #[arg(long)]
    check: bool,
}

fn build_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_toml_for(&text, kind)?
        }
        None => ExperimentConfig::new(kind),
    };
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.env.seed = s;
    }
    if let Some(r) = args.replicas {
        cfg.replicas = r;
    }
    if let Some(d) = args.dims {
        cfg.d = d;
    }
    if let Some(b) = args.beta {
        cfg.env.beta = b;
    }
    if let Some(f) = &args.family {
        cfg.env.family = f.clone();
    }
    if let Some(ns) = &args.n_grid {
        cfg.n_grid = ns.clone();
    }
    if let Some(d) = args.delta {
        cfg.delta = d;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.as_ref().map(PathBuf::from).unwrap_or_else(|| Path::new("polylab-out").join(cfg.kind.name()))
}

fn report(out: &RunOutput, dir: &Path) {
    println!("{} ({} samples, {:.1}s) -> {}", out.config.kind.name(), out.samples.len(), out.wall_time_s, dir.display());
    println!("config hash {}", out.config_hash);
    for c in &out.checks {
        println!("  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
}

fn run_kind(kind: ExperimentKind, args: &RunArgs) -> Result<ExitCode, Error> {
    let cfg = build_config(kind, args)?;
    let out = run(&cfg)?;
    let dir = out_dir(&cfg);
    out.write(&dir)?;
    report(&out, &dir);
    if args.check && !out.passed() {
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

fn rerun(args: &RerunArgs) -> Result<ExitCode, Error> {
    let path = if args.summary.is_dir() { args.summary.join(SUMMARY_FILE) } else { args.summary.clone() };
    let mut cfg = config_from_summary(&path)?;
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    cfg.out = args.out.as_ref().map(|p| p.display().to_string());
    let out = run(&cfg)?;
    if let Some(dir) = &args.out {
        out.write(dir)?;
    }
    let same = out.payload() == payload_from_summary(&path)?;
    println!(
        "rerun of {} at {} threads: {}",
        path.display(),
        cfg.threads,
        if same { "identical" } else { "DIFFERENT" }
    );
    if args.check && !same {
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => run_kind(ExperimentKind::Simulate, a),
        Command::Exponent(a) => run_kind(ExperimentKind::Exponent, a),
        Command::Tail(a) => run_kind(ExperimentKind::Tail, a),
        Command::Overlap(a) => run_kind(ExperimentKind::Overlap, a),
        Command::Moments(a) => run_kind(ExperimentKind::Moments, a),
        Command::Compare(a) => run_kind(ExperimentKind::Compare, a),
        Command::Covariance(a) => run_kind(ExperimentKind::Covariance, a),
        Command::Doob(a) => run_kind(ExperimentKind::Doob, a),
        Command::AppendixPhi(a) => run_kind(ExperimentKind::AppendixPhi, a),
        Command::Rerun(a) => rerun(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("polylab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply() {
        let args = RunArgs {
            beta: Some(0.3),
            n_grid: Some(vec![4, 8, 16]),
            replicas: Some(40),
            dims: Some(2),
            ..Default::default()
        };
        let cfg = build_config(ExperimentKind::Exponent, &args).unwrap();
        assert_eq!((cfg.env.beta, cfg.d, cfg.replicas), (0.3, 2, 40));
        assert_eq!(cfg.n_grid, vec![4, 8, 16]);
        let bad = RunArgs { family: Some("poisson".into()), ..Default::default() };
        assert_eq!(build_config(ExperimentKind::Simulate, &bad).unwrap_err().exit_code(), 2);
    }
}
