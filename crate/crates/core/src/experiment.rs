//! File-based experiment orchestration: environment specs, seeded repeats,
//! JSONL traces, summary CSV, and the machine-readable report.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{chain_mdp, generate_random_mdp, CartPoleConfig, CartPoleEnv, Environment, TabularEnv};
use crate::error::{CoreError, Result};
use crate::features::{FeatureMap, FourierSpec};
use crate::politex::{run, PolitexConfig, RegretTrace, RunOutput};

/// Environment description inside an experiment config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EnvSpec {
    RandomMdp {
        n_states: usize,
        n_actions: usize,
        mixing_floor: f64,
        seed: u64,
    },
    Chain {
        n_states: usize,
    },
    Cartpole {
        #[serde(default)]
        config: CartPoleConfig,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::RandomMdp {
                n_states,
                n_actions,
                mixing_floor,
                seed,
            } => Box::new(TabularEnv::new(generate_random_mdp(
                *n_states,
                *n_actions,
                *mixing_floor,
                *seed,
            )?)),
            EnvSpec::Chain { n_states } => Box::new(TabularEnv::new(chain_mdp(*n_states)?)),
            EnvSpec::Cartpole { config } => Box::new(CartPoleEnv::new(config.clone())),
        })
    }
}

/// Feature map description inside an experiment config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FeatureSpec {
    OneHot,
    BlockFourier { spec: FourierSpec },
}

impl FeatureSpec {
    pub fn build(&self, env: &dyn Environment) -> Result<FeatureMap> {
        match self {
            FeatureSpec::OneHot => {
                let mdp = env.tabular().ok_or_else(|| {
                    CoreError::InvalidParameter(
                        "one-hot features need a tabular environment".into(),
                    )
                })?;
                Ok(FeatureMap::tabular_one_hot(mdp.n_states(), mdp.n_actions()))
            }
            FeatureSpec::BlockFourier { spec } => {
                FeatureMap::block_fourier(spec.clone(), env.n_actions())
            }
        }
    }
}

fn default_repeat() -> usize {
    1
}

/// A full experiment: environment, driver parameters, features, outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvSpec,
    pub politex: PolitexConfig,
    pub features: FeatureSpec,
    pub output_dir: PathBuf,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        if config.repeat == 0 {
            return Err(CoreError::InvalidParameter("repeat must be >= 1".into()));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Outcome of one seeded run inside an experiment.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub status: String,
    pub final_mean_reward: Option<f64>,
    pub final_cum_regret: Option<f64>,
    pub mirror_descent_violations: Option<usize>,
    pub clamp_events: Option<u64>,
}

/// Machine-readable experiment report (also written as JSON).
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub eta: Option<f64>,
    pub b: Option<usize>,
    pub alpha: Option<f64>,
    pub runs: Vec<RunSummary>,
    pub n_failures: usize,
    /// False when a run failed or a strict assertion was violated.
    pub pass: bool,
}

/// Number of parallel workers: `RL_LAB_THREADS` when set, rayon's default
/// otherwise.
pub fn worker_count() -> usize {
    std::env::var("RL_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

fn build_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| CoreError::InvalidParameter(format!("thread pool: {e}")))
}

/// Executes one seeded run of an experiment configuration.
pub fn run_single(config: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let mut env = config.environment.build()?;
    let map = config.features.build(env.as_ref())?;
    let mut politex_config = config.politex.clone();
    politex_config.seed = seed;
    run(&politex_config, env.as_mut(), &map)
}

/// Runs `repeat` seeded repetitions (seed = base + run index), writing one
/// JSONL trace per run, a per-phase summary CSV, a summary JSON with the
/// config echo, and the machine-readable report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let out_dir = &config.output_dir;
    if !out_dir.is_dir() {
        return Err(CoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", out_dir.display()),
        )));
    }

    let pool = build_pool()?;
    let results: Vec<(usize, u64, Result<RegretTrace>)> = pool.install(|| {
        (0..config.repeat)
            .into_par_iter()
            .map(|idx| {
                let seed = config.politex.seed + idx as u64;
                let trace = run_single(config, seed).and_then(|out| {
                    write_trace(&trace_path(out_dir, idx), &out.trace)?;
                    Ok(out.trace)
                });
                (idx, seed, trace)
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (idx, seed, outcome) in results {
        match outcome {
            Ok(trace) => {
                let last = trace.records.last();
                runs.push(RunSummary {
                    run: idx,
                    seed,
                    status: "ok".into(),
                    final_mean_reward: last.map(|r| r.mean_reward),
                    final_cum_regret: last.and_then(|r| r.cum_regret),
                    mirror_descent_violations: Some(trace.mirror_descent_violations),
                    clamp_events: Some(trace.clamp_events),
                });
                traces.push(trace);
            }
            Err(err) => runs.push(RunSummary {
                run: idx,
                seed,
                status: format!("error: {err}"),
                final_mean_reward: None,
                final_cum_regret: None,
                mirror_descent_violations: None,
                clamp_events: None,
            }),
        }
    }

    write_summary_csv(&out_dir.join("summary.csv"), &traces)?;

    let n_failures = runs.iter().filter(|r| r.status != "ok").count();
    let strict_violation = config.politex.strict_invariants
        && runs
            .iter()
            .any(|r| r.mirror_descent_violations.unwrap_or(0) > 0);
    let report = ExperimentReport {
        config: config.clone(),
        eta: traces.first().map(|t| t.eta),
        b: traces.first().map(|t| t.b),
        alpha: traces.first().map(|t| t.alpha),
        runs,
        n_failures,
        pass: n_failures == 0 && !strict_violation,
    };

    let summary = serde_json::json!({
        "config": report.config,
        "eta": report.eta,
        "b": report.b,
        "alpha": report.alpha,
        "final_cum_regret": report.runs.iter().map(|r| r.final_cum_regret).collect::<Vec<_>>(),
        "final_mean_reward": report.runs.iter().map(|r| r.final_mean_reward).collect::<Vec<_>>(),
    });
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    fs::write(
        out_dir.join("acceptance_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

pub fn trace_path(out_dir: &Path, run_idx: usize) -> PathBuf {
    out_dir.join(format!("trace_run{run_idx:03}.jsonl"))
}

fn write_trace(path: &Path, trace: &RegretTrace) -> Result<()> {
    let mut writer = BufWriter::new(fs::File::create(path)?);
    for record in &trace.records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-phase mean and standard deviation of the phase reward across runs.
fn write_summary_csv(path: &Path, traces: &[RegretTrace]) -> Result<()> {
    let mut writer = BufWriter::new(fs::File::create(path)?);
    writeln!(writer, "phase,mean_reward_mean,mean_reward_std")?;
    if traces.is_empty() {
        return Ok(());
    }
    let phases = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    for k in 0..phases {
        let values: Vec<f64> = traces.iter().map(|t| t.records[k].mean_reward).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        writeln!(writer, "{},{mean},{std}", k + 1)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Grid of driver parameters layered over a base experiment.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub eta: Vec<f64>,
    pub b: Vec<usize>,
    pub backend: Vec<crate::politex::Backend>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub eta: Option<f64>,
    pub b: Option<usize>,
    pub backend: Option<crate::politex::Backend>,
    pub final_mean_reward_mean: Option<f64>,
    pub final_mean_reward_std: Option<f64>,
    pub n_failures: usize,
}

fn backend_label(backend: &crate::politex::Backend) -> String {
    use crate::politex::Backend;
    match backend {
        Backend::WeightAveraging => "weight-averaging".into(),
        Backend::ReplayFull => "replay-full".into(),
        Backend::ReplayUniform { s } => format!("replay-uniform-s{s}"),
        Backend::ReplayCoreset { s } => format!("replay-coreset-s{s}"),
    }
}

/// Runs the cartesian product of the grid (absent axes keep the base value).
/// Each point writes into its own subdirectory of the base output directory.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<SweepPoint>> {
    let out_root = &sweep.base.output_dir;
    if !out_root.is_dir() {
        return Err(CoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", out_root.display()),
        )));
    }
    let etas: Vec<Option<f64>> = if sweep.grid.eta.is_empty() {
        vec![None]
    } else {
        sweep.grid.eta.iter().copied().map(Some).collect()
    };
    let bs: Vec<Option<usize>> = if sweep.grid.b.is_empty() {
        vec![None]
    } else {
        sweep.grid.b.iter().copied().map(Some).collect()
    };
    let backends: Vec<Option<crate::politex::Backend>> = if sweep.grid.backend.is_empty() {
        vec![None]
    } else {
        sweep.grid.backend.iter().copied().map(Some).collect()
    };

    let mut points = Vec::new();
    for eta in &etas {
        for b in &bs {
            for backend in &backends {
                let mut config = sweep.base.clone();
                let mut label_parts = Vec::new();
                if let Some(eta) = eta {
                    config.politex.eta = crate::politex::EtaMode::Fixed(*eta);
                    label_parts.push(format!("eta{eta}"));
                }
                if let Some(b) = b {
                    config.politex.b = Some(*b);
                    label_parts.push(format!("b{b}"));
                }
                if let Some(backend) = backend {
                    config.politex.backend = *backend;
                    label_parts.push(backend_label(backend));
                }
                let label = if label_parts.is_empty() {
                    "base".to_string()
                } else {
                    label_parts.join("_")
                };
                let dir = out_root.join(&label);
                fs::create_dir_all(&dir)?;
                config.output_dir = dir;

                let report = run_experiment(&config)?;
                let rewards: Vec<f64> = report
                    .runs
                    .iter()
                    .filter_map(|r| r.final_mean_reward)
                    .collect();
                let mean = (!rewards.is_empty())
                    .then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
                let std = mean.filter(|_| rewards.len() > 1).map(|m| {
                    (rewards.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                        / (rewards.len() - 1) as f64)
                        .sqrt()
                });
                points.push(SweepPoint {
                    label,
                    eta: *eta,
                    b: *b,
                    backend: *backend,
                    final_mean_reward_mean: mean,
                    final_mean_reward_std: std,
                    n_failures: report.n_failures,
                });
            }
        }
    }

    let mut csv = String::from("label,eta,b,backend,final_mean_reward_mean,final_mean_reward_std,n_failures\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.label,
            p.eta.map(|v| v.to_string()).unwrap_or_default(),
            p.b.map(|v| v.to_string()).unwrap_or_default(),
            p.backend.as_ref().map(backend_label).unwrap_or_default(),
            p.final_mean_reward_mean.map(|v| v.to_string()).unwrap_or_default(),
            p.final_mean_reward_std.map(|v| v.to_string()).unwrap_or_default(),
            p.n_failures
        ));
    }
    fs::write(out_root.join("sweep_summary.csv"), csv)?;
    Ok(points)
}

// ---------------------------------------------------------------------------
// Trace conversion
// ---------------------------------------------------------------------------

/// Converts a trace JSONL file to CSV (nulls become empty cells).
pub fn trace_jsonl_to_csv(input: &Path, output: &Path) -> Result<()> {
    #[derive(Deserialize)]
    struct Record {
        k: usize,
        mean_reward: f64,
        j_pi: Option<f64>,
        cum_regret: Option<f64>,
        policy_step_l1: f64,
        eta_bound: f64,
        est_error: Option<f64>,
    }
    let text = fs::read_to_string(input)?;
    let mut out = String::from("k,mean_reward,j_pi,cum_regret,policy_step_l1,eta_bound,est_error\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: Record = serde_json::from_str(line)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k,
            r.mean_reward,
            opt(r.j_pi),
            opt(r.cum_regret),
            r.policy_step_l1,
            r.eta_bound,
            opt(r.est_error)
        ));
    }
    fs::write(output, out)?;
    Ok(())
}
