//! `politex` — generate environments, solve them exactly, run phased
//! mirror-descent experiments, sweep parameter grids, and check the
//! acceptance property suite.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use politex_core::checks;
use politex_core::env::generate_random_mdp;
use politex_core::experiment::{
    run_experiment, run_sweep, trace_jsonl_to_csv, ExperimentConfig, SweepConfig,
};
use politex_core::mdp::{find_optimal_policy, solve_values, Policy, TabularMdp};
use politex_core::politex::Backend;

#[derive(Parser)]
#[command(
    name = "politex",
    about = "Regularized policy iteration for average-reward MDPs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random ergodic MDP and write it as JSON.
    GenMdp(GenMdpArgs),
    /// Exactly solve an MDP for a policy (and the optimal policy when small).
    Solve(SolveArgs),
    /// Run an experiment from a config file.
    Run(RunArgs),
    /// Run a parameter grid over a base experiment.
    Sweep(SweepArgs),
    /// Run the acceptance property suite.
    Check(CheckArgs),
    /// Convert a trace JSONL file to CSV.
    TraceToCsv(TraceArgs),
}

#[derive(Args)]
struct GenMdpArgs {
    #[arg(long, default_value_t = 5)]
    n_states: usize,
    #[arg(long, default_value_t = 3)]
    n_actions: usize,
    /// Per-entry transition floor guaranteeing ergodicity (0, 1/n_states].
    #[arg(long, default_value_t = 0.05)]
    mixing_floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// MDP JSON file.
    #[arg(long)]
    mdp: PathBuf,
    /// Policy JSON file ({"probs": [[...]]}); uniform when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the estimator backend: weight-averaging, replay-full,
    /// replay-uniform:S, replay-coreset:S.
    #[arg(long)]
    backend: Option<String>,
    /// Turn in-loop invariant violations into run failures.
    #[arg(long)]
    strict_invariants: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config JSON ({"base": <experiment>, "grid": {...}}).
    #[arg(long)]
    config: PathBuf,
    /// Override the base output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Run every criterion, including the slow scaling and cart-pole ones.
    #[arg(long)]
    full: bool,
    /// Comma-separated criterion ids (overrides --full).
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Trace JSONL produced by `run`.
    #[arg(long)]
    input: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_backend(name: &str) -> Result<Backend> {
    if let Some(rest) = name.strip_prefix("replay-uniform:") {
        let s = rest.parse().context("subsample size in replay-uniform:S")?;
        return Ok(Backend::ReplayUniform { s });
    }
    if let Some(rest) = name.strip_prefix("replay-coreset:") {
        let s = rest.parse().context("subsample size in replay-coreset:S")?;
        return Ok(Backend::ReplayCoreset { s });
    }
    match name {
        "weight-averaging" => Ok(Backend::WeightAveraging),
        "replay-full" => Ok(Backend::ReplayFull),
        _ => bail!(
            "unknown backend {name:?}; expected weight-averaging, replay-full, \
             replay-uniform:S or replay-coreset:S"
        ),
    }
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_gen_mdp(args: GenMdpArgs) -> Result<ExitCode> {
    let mdp = generate_random_mdp(args.n_states, args.n_actions, args.mixing_floor, args.seed)?;
    write_or_print(args.out.as_ref(), &mdp.to_json()?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode> {
    let mdp: TabularMdp = TabularMdp::from_json(
        &fs::read_to_string(&args.mdp).with_context(|| format!("reading {}", args.mdp.display()))?,
    )?;
    let policy = match &args.policy {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => Policy::uniform(mdp.n_states(), mdp.n_actions()),
    };
    let solution = solve_values(&mdp, &policy)?;
    let optimal = match find_optimal_policy(&mdp) {
        Ok((pi_star, j_star)) => Some(serde_json::json!({
            "gain": j_star,
            "policy": pi_star,
        })),
        Err(politex_core::CoreError::SizeLimit { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let output = serde_json::json!({
        "policy_solution": solution,
        "optimal": optimal,
    });
    write_or_print(args.out.as_ref(), &serde_json::to_string_pretty(&output)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let backend = args.backend.as_deref().map(parse_backend).transpose()?;
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.politex.seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(backend) = backend {
        config.politex.backend = backend;
    }
    if args.strict_invariants {
        config.politex.strict_invariants = true;
    }
    let report = run_experiment(&config)?;
    for run in &report.runs {
        eprintln!(
            "run {:03} seed {}: {}{}",
            run.run,
            run.seed,
            run.status,
            run.final_mean_reward
                .map(|r| format!(" (final mean reward {r:.4})"))
                .unwrap_or_default()
        );
    }
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} run(s) failed", report.n_failures);
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut sweep = SweepConfig::load(&args.config)?;
    if let Some(out) = args.out {
        sweep.base.output_dir = out;
    }
    let points = run_sweep(&sweep)?;
    let mut failures = 0;
    for point in &points {
        eprintln!(
            "{}: final mean reward {}{}",
            point.label,
            point
                .final_mean_reward_mean
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            point
                .final_mean_reward_std
                .map(|v| format!(" +- {v:.4}"))
                .unwrap_or_default()
        );
        failures += point.n_failures;
    }
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    let ids: Vec<usize> = if !args.criteria.is_empty() {
        args.criteria.clone()
    } else if args.full {
        checks::all_ids()
    } else {
        checks::QUICK_IDS.to_vec()
    };
    let scratch = tempfile::tempdir().context("creating scratch directory")?;
    let mut results = Vec::new();
    let mut all_pass = true;
    for id in ids {
        let result = checks::run_criterion(id, scratch.path())?;
        println!("{}", result.line());
        all_pass &= result.pass;
        results.push(result);
    }
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&results)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_trace(args: TraceArgs) -> Result<ExitCode> {
    trace_jsonl_to_csv(&args.input, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenMdp(args) => cmd_gen_mdp(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Check(args) => cmd_check(args),
        Command::TraceToCsv(args) => cmd_trace(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
