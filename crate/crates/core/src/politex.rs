//! The phased mirror-descent policy iteration driver.
//!
//! Each phase executes the current policy, turns the trajectory into
//! centered b-step returns, estimates the average Q-function with the
//! configured backend, and sets the next policy proportional to
//! `exp(eta * k * Qhat_k)`. Tabular environments additionally get exact
//! per-phase diagnostics (gain, regret against the optimal policy, exact
//! estimation error).

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Obs};
use crate::error::{CoreError, Result};
use crate::estimation::{
    average_weights, block_schedule, default_alpha, lsmc_fit, PhaseDataset, PhaseStep, ReturnMode,
    WeightEstimate,
};
use crate::features::{FeatureMap, FeatureVec};
use crate::mdp::{
    ergodicity_coefficient, find_optimal_policy, policy_transition, sample_categorical,
    solve_values, Policy, TabularMdp,
};
use crate::replay::{coreset_subsample, fit_average_q, uniform_subsample, ReplayBuffer, ReplaySample};

/// Estimator backend for the average Q-function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Backend {
    /// Per-phase LSMC fits averaged in weight space.
    WeightAveraging,
    /// Single fit over all stored data.
    ReplayFull,
    /// Replay with uniform per-phase subsampling of size `s`.
    ReplayUniform { s: usize },
    /// Replay with coreset per-phase subsampling of size `s`.
    ReplayCoreset { s: usize },
}

/// Step size: fixed, or resolved from `sqrt(8 log |A|) / (Q_max sqrt(K))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaMode {
    Auto,
    Fixed(f64),
}

impl Serialize for EtaMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EtaMode::Auto => serializer.serialize_str("auto"),
            EtaMode::Fixed(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for EtaMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(EtaMode::Fixed(v)),
            Raw::Text(s) if s == "auto" => Ok(EtaMode::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "eta must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

fn default_return_mode() -> ReturnMode {
    ReturnMode::Practical
}

/// Driver configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolitexConfig {
    /// Phase length in environment steps.
    pub tau: usize,
    /// Number of phases K.
    pub phases: usize,
    pub eta: EtaMode,
    /// Boundedness constant used by the auto step size. A practical
    /// heuristic when unknown: the largest |R_t| seen in pilot runs.
    pub q_max: f64,
    /// Return horizon; `None` resolves it from the measured ergodicity
    /// coefficient on tabular environments.
    pub b: Option<usize>,
    /// Blocks per parity class (analysis return mode only).
    pub m: Option<usize>,
    /// Ridge strength; `None` resolves to `sqrt(tau / K)`.
    pub alpha: Option<f64>,
    #[serde(default = "default_return_mode")]
    pub return_mode: ReturnMode,
    pub backend: Backend,
    /// Norm cap applied to fitted weight vectors (boundedness guard).
    #[serde(default)]
    pub weight_clip: Option<f64>,
    /// Replay capacity; `None` is unlimited.
    #[serde(default)]
    pub buffer_capacity: Option<usize>,
    /// Turn in-loop invariant violations into hard errors.
    #[serde(default)]
    pub strict_invariants: bool,
    pub seed: u64,
}

/// Per-phase record. The serialized form carries exactly the documented
/// trace schema; extra in-memory diagnostics are skipped.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseRecord {
    pub k: usize,
    pub mean_reward: f64,
    /// Exact gain of the executed policy (tabular only).
    pub j_pi: Option<f64>,
    /// Running regret against the optimal gain (tabular only).
    pub cum_regret: Option<f64>,
    /// Max over probed states of ||pi_{k+1}(.|x) - pi_k(.|x)||_1.
    pub policy_step_l1: f64,
    /// Mirror-descent bound eta * max_x ||Qhat_pik(x, .)||_inf.
    pub eta_bound: f64,
    /// ||what_k - w_k||_2 against the exact average weights
    /// (tabular one-hot only).
    pub est_error: Option<f64>,
    /// Assumption-2 surface: max over probed states of the Q-range of the
    /// implied per-phase estimate.
    #[serde(skip)]
    pub q_range: f64,
}

/// Result of a full run.
#[derive(Clone, Debug, Serialize)]
pub struct RegretTrace {
    pub records: Vec<PhaseRecord>,
    /// Optimal gain when exactly solvable.
    pub j_star: Option<f64>,
    /// Resolved parameters.
    pub eta: f64,
    pub b: usize,
    pub alpha: f64,
    pub total_reward: f64,
    /// States violating the mirror-descent step bound across the whole run.
    pub mirror_descent_violations: usize,
    /// Out-of-range observations clamped by the feature map.
    pub clamp_events: u64,
}

pub struct RunOutput {
    pub trace: RegretTrace,
    /// Final average-Q weight estimate `what_K`.
    pub final_weights: WeightEstimate,
    /// Final policy table (tabular environments only).
    pub final_policy: Option<Policy>,
}

// ---------------------------------------------------------------------------
// Softmax policy updates
// ---------------------------------------------------------------------------

/// Numerically stable softmax of one logit row (max subtraction).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Policy table `pi(a|x) ∝ exp(logits[x][a])`.
pub fn softmax_policy(logits: &[Vec<f64>]) -> Result<Policy> {
    for (x, row) in logits.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter(format!(
                "non-finite logits at state {x}"
            )));
        }
    }
    Policy::from_rows(logits.iter().map(|row| softmax_row(row)).collect())
}

/// Softmax policy from linear weights: logits `coeff * w^T phi(x, a)` over
/// the enumerated tabular states.
pub fn softmax_policy_linear(
    map: &FeatureMap,
    weights: &DVector<f64>,
    coeff: f64,
    n_states: usize,
) -> Result<Policy> {
    let logits = linear_logits(map, weights, coeff, n_states);
    softmax_policy(&logits)
}

fn linear_logits(
    map: &FeatureMap,
    weights: &DVector<f64>,
    coeff: f64,
    n_states: usize,
) -> Vec<Vec<f64>> {
    (0..n_states)
        .map(|x| {
            (0..map.n_actions())
                .map(|a| coeff * map.featurize(&Obs::Index(x), a).dot(weights))
                .collect()
        })
        .collect()
}

/// Theorem step size `eta = sqrt(8 log |A|) / (Q_max sqrt(K))`.
pub fn compute_eta(phases: usize, q_max: f64, n_actions: usize) -> Result<f64> {
    if phases == 0 {
        return Err(CoreError::InvalidParameter("K must be >= 1".into()));
    }
    if q_max <= 0.0 {
        return Err(CoreError::InvalidParameter("Q_max must be > 0".into()));
    }
    if n_actions < 2 {
        return Err(CoreError::InvalidParameter(
            "auto eta needs at least two actions (log |A| = 0 otherwise)".into(),
        ));
    }
    Ok((8.0 * (n_actions as f64).ln()).sqrt() / (q_max * (phases as f64).sqrt()))
}

/// Consecutive-policy diagnostics over a common state set: the realized max
/// L1 policy step and the mirror-descent bound `eta * max_x ||q(x, .)||_inf`.
pub fn policy_step_diagnostic(
    prev: &Policy,
    next: &Policy,
    eta: f64,
    q_implied: &[Vec<f64>],
) -> (f64, f64) {
    let l1 = next.l1_distance(prev);
    let bound = eta
        * q_implied
            .iter()
            .map(|row| row.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
    (l1, bound)
}

/// Number of states where `||pi_next - pi_prev||_1` exceeds the per-state
/// bound `eta * ||q(x, .)||_inf` by more than `tol`.
pub fn policy_step_violations(
    prev: &Policy,
    next: &Policy,
    eta: f64,
    q_implied: &[Vec<f64>],
    tol: f64,
) -> usize {
    (0..prev.n_states())
        .filter(|&x| {
            let l1: f64 = prev
                .row(x)
                .iter()
                .zip(next.row(x))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let sup = q_implied[x].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            l1 > eta * sup + tol
        })
        .count()
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct EstimatorState {
    backend: Backend,
    fits: Vec<WeightEstimate>,
    buffer: ReplayBuffer,
}

impl EstimatorState {
    fn new(backend: Backend, capacity: Option<usize>) -> Self {
        Self {
            backend,
            fits: Vec::new(),
            buffer: ReplayBuffer::new(capacity),
        }
    }

    /// Ingests one phase's regression samples and returns `what_k`.
    fn ingest(
        &mut self,
        samples: &[(FeatureVec, f64)],
        alpha: f64,
        phase: usize,
        weight_clip: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<WeightEstimate> {
        let mut estimate = match self.backend {
            Backend::WeightAveraging => {
                let mut fit = lsmc_fit(samples, alpha, phase)?;
                if let Some(cap) = weight_clip {
                    fit.clip(cap);
                }
                self.fits.push(fit);
                average_weights(&self.fits)?
            }
            Backend::ReplayFull | Backend::ReplayUniform { .. } | Backend::ReplayCoreset { .. } => {
                fit_average_q(samples, &mut self.buffer, alpha, phase)?
            }
        };
        if let Some(cap) = weight_clip {
            estimate.clip(cap);
        }
        // Store the phase after fitting, per the replay schedule.
        match self.backend {
            Backend::WeightAveraging => {}
            Backend::ReplayFull => {
                let stored: Vec<ReplaySample> = samples
                    .iter()
                    .map(|(phi, ret)| ReplaySample {
                        phi: phi.clone(),
                        ret: *ret,
                        phase,
                        weight: 1.0,
                    })
                    .collect();
                self.buffer.push_phase(phase, samples.len(), stored);
                self.buffer.evict_to_capacity(rng)?;
            }
            Backend::ReplayUniform { s } => {
                let stored = uniform_subsample(samples, phase, s, rng)?;
                self.buffer.push_phase(phase, samples.len(), stored);
                self.buffer.evict_to_capacity(rng)?;
            }
            Backend::ReplayCoreset { s } => {
                let stored = coreset_subsample(samples, phase, s, estimate.weights(), rng)?;
                self.buffer.push_phase(phase, samples.len(), stored);
                self.buffer.evict_to_capacity(rng)?;
            }
        }
        Ok(estimate)
    }
}

/// Exact oracles available for tabular environments.
struct TabularOracles {
    mdp: TabularMdp,
    j_star: Option<f64>,
    /// Running sum of exact per-policy Q weights (one-hot coordinates).
    exact_weight_sum: Option<DVector<f64>>,
}

/// Runs Politex and returns the per-phase trace.
pub fn run(config: &PolitexConfig, env: &mut dyn Environment, map: &FeatureMap) -> Result<RunOutput> {
    validate_config(config, env, map)?;
    let tau = config.tau;
    let k_total = config.phases;
    let n_actions = env.n_actions();
    let dim = map.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Resolve exact oracles.
    let mut oracles = match env.tabular() {
        Some(mdp) => {
            let j_star = match find_optimal_policy(mdp) {
                Ok((_, j)) => Some(j),
                Err(CoreError::SizeLimit { .. }) => None,
                Err(e) => return Err(e),
            };
            let one_hot = matches!(map, FeatureMap::TabularOneHot { .. });
            Some(TabularOracles {
                mdp: mdp.clone(),
                j_star,
                exact_weight_sum: one_hot.then(|| DVector::zeros(dim)),
            })
        }
        None => None,
    };

    // Resolve parameters.
    let eta = match config.eta {
        EtaMode::Fixed(v) if v > 0.0 => v,
        EtaMode::Fixed(v) => {
            return Err(CoreError::InvalidParameter(format!("eta = {v} must be > 0")))
        }
        EtaMode::Auto => compute_eta(k_total, config.q_max, n_actions)?,
    };
    let b = resolve_b(config, oracles.as_ref().map(|o| &o.mdp))?;
    let alpha = config.alpha.unwrap_or_else(|| default_alpha(tau, k_total));
    let schedule = match config.return_mode {
        ReturnMode::Practical => None,
        ReturnMode::Analysis => {
            let m = config.m.ok_or_else(|| {
                CoreError::InvalidParameter("analysis return mode needs m".into())
            })?;
            Some(block_schedule(tau, b, m)?)
        }
    };

    let mut estimator = EstimatorState::new(config.backend, config.buffer_capacity);
    let mut prev_weights = WeightEstimate::zero(dim); // what_{k-1}, zero for k = 1
    let mut current_weights = WeightEstimate::zero(dim);
    let mut records = Vec::with_capacity(k_total);
    let mut total_reward = 0.0;
    let mut violations_total = 0usize;

    // Tabular policy tables for exact diagnostics and table-based action
    // sampling; lazy weight evaluation otherwise.
    let n_tab_states = oracles.as_ref().map(|o| o.mdp.n_states());
    let mut policy_table = n_tab_states.map(|n| Policy::uniform(n, n_actions));

    let mut obs = env.reset(&mut rng);

    for k in 1..=k_total {
        // --- Execute pi_k for tau steps. ---
        let mut steps = Vec::with_capacity(tau);
        let mut feats = Vec::with_capacity(tau);
        let mut episode_ends = Vec::new();
        for t in 0..tau {
            let action = match &policy_table {
                Some(table) => {
                    let x = obs.index().expect("tabular env yields index observations");
                    sample_categorical(&mut rng, table.row(x))
                }
                None => {
                    let logits: Vec<f64> = (0..n_actions)
                        .map(|a| {
                            eta * (k as f64 - 1.0)
                                * map.featurize(&obs, a).dot(prev_weights.weights())
                        })
                        .collect();
                    sample_categorical(&mut rng, &softmax_row(&logits))
                }
            };
            feats.push(map.featurize(&obs, action));
            let out = env.step(action, &mut rng);
            steps.push(PhaseStep {
                obs: std::mem::replace(&mut obs, out.obs),
                action,
                reward: out.reward,
            });
            if out.episode_end {
                episode_ends.push(t + 1);
                obs = env.reset(&mut rng);
            }
        }
        let dataset = PhaseDataset::new(k, steps, episode_ends);
        let phase_reward: f64 = dataset.steps.iter().map(|s| s.reward).sum();
        total_reward += phase_reward;
        let mean_reward = phase_reward / tau as f64;

        // --- Returns and fit. ---
        let (_j_hat, returns) = match &schedule {
            None => {
                let j = dataset.empirical_gain_practical().map_err(|e| e.in_phase(k))?;
                let r = dataset.returns_practical(b, j).map_err(|e| e.in_phase(k))?;
                (j, r)
            }
            Some(s) => {
                let j = dataset.empirical_gain_analysis(s).map_err(|e| e.in_phase(k))?;
                let r = dataset.returns_analysis(s, j).map_err(|e| e.in_phase(k))?;
                (j, r)
            }
        };
        let samples: Vec<(FeatureVec, f64)> = returns
            .iter()
            .map(|rs| (feats[rs.t].clone(), rs.value))
            .collect();
        let estimate = estimator
            .ingest(&samples, alpha, k, config.weight_clip, &mut rng)
            .map_err(|e| e.in_phase(k))?;

        // --- Next policy and diagnostics. ---
        let implied = implied_phase_weights(k, &estimate, &prev_weights);
        let (policy_step_l1, eta_bound, q_range, violations, next_table) = match &policy_table {
            Some(table) => {
                let n = n_tab_states.unwrap();
                let q_implied: Vec<Vec<f64>> = (0..n)
                    .map(|x| {
                        (0..n_actions)
                            .map(|a| map.featurize(&Obs::Index(x), a).dot(&implied))
                            .collect()
                    })
                    .collect();
                let next =
                    softmax_policy_linear(map, estimate.weights(), eta * k as f64, n)
                        .map_err(|e| e.in_phase(k))?;
                let (l1, bound) = policy_step_diagnostic(table, &next, eta, &q_implied);
                let viol = policy_step_violations(table, &next, eta, &q_implied, 1e-10);
                (l1, bound, q_table_range(&q_implied), viol, Some(next))
            }
            None => {
                // Probe a deterministic subset of this phase's states.
                let stride = (tau / 256).max(1);
                let probes: Vec<&Obs> =
                    dataset.steps.iter().step_by(stride).map(|s| &s.obs).collect();
                let mut l1_max = 0.0_f64;
                let mut sup_max = 0.0_f64;
                let mut range_max = 0.0_f64;
                let mut viol = 0usize;
                for probe in probes {
                    let mut prev_logits = Vec::with_capacity(n_actions);
                    let mut next_logits = Vec::with_capacity(n_actions);
                    let mut q_row = Vec::with_capacity(n_actions);
                    for a in 0..n_actions {
                        let phi = map.featurize(probe, a);
                        prev_logits
                            .push(eta * (k as f64 - 1.0) * phi.dot(prev_weights.weights()));
                        next_logits.push(eta * k as f64 * phi.dot(estimate.weights()));
                        q_row.push(phi.dot(&implied));
                    }
                    let p = softmax_row(&prev_logits);
                    let q = softmax_row(&next_logits);
                    let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
                    let sup = q_row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                    let lo = q_row.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if l1 > eta * sup + 1e-10 {
                        viol += 1;
                    }
                    l1_max = l1_max.max(l1);
                    sup_max = sup_max.max(sup);
                    range_max = range_max.max(hi - lo);
                }
                (l1_max, eta * sup_max, range_max, viol, None)
            }
        };
        violations_total += violations;
        if config.strict_invariants && violations > 0 {
            return Err(CoreError::InvariantViolation(format!(
                "phase {k}: mirror-descent step bound violated at {violations} state(s)"
            )));
        }

        // --- Exact oracles. ---
        let (j_pi, cum_regret, est_error) = match oracles.as_mut() {
            Some(oracle) => {
                let table = policy_table.as_ref().unwrap();
                let solution = solve_values(&oracle.mdp, table).map_err(|e| e.in_phase(k))?;
                let est_error = oracle.exact_weight_sum.as_mut().map(|sum| {
                    *sum += solution.q_weights();
                    let exact_avg = &*sum / k as f64;
                    (estimate.weights() - exact_avg).norm()
                });
                let cum = oracle
                    .j_star
                    .map(|j_star| (k * tau) as f64 * j_star - total_reward);
                (Some(solution.gain), cum, est_error)
            }
            None => (None, None, None),
        };

        records.push(PhaseRecord {
            k,
            mean_reward,
            j_pi,
            cum_regret,
            policy_step_l1,
            eta_bound,
            est_error,
            q_range,
        });

        prev_weights = estimate.clone();
        current_weights = estimate;
        if let Some(next) = next_table {
            policy_table = Some(next);
        }
    }

    let trace = RegretTrace {
        records,
        j_star: oracles.as_ref().and_then(|o| o.j_star),
        eta,
        b,
        alpha,
        total_reward,
        mirror_descent_violations: violations_total,
        clamp_events: map.clamp_events(),
    };
    Ok(RunOutput {
        trace,
        final_weights: current_weights,
        final_policy: policy_table,
    })
}

fn q_table_range(q: &[Vec<f64>]) -> f64 {
    q.iter()
        .map(|row| {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// `Qhat_pik = k Qhat_k - (k-1) Qhat_{k-1}` in weight space.
fn implied_phase_weights(
    k: usize,
    current: &WeightEstimate,
    previous: &WeightEstimate,
) -> DVector<f64> {
    current.weights() * k as f64 - previous.weights() * (k as f64 - 1.0)
}

fn validate_config(
    config: &PolitexConfig,
    env: &dyn Environment,
    map: &FeatureMap,
) -> Result<()> {
    if config.tau == 0 {
        return Err(CoreError::InvalidParameter("tau must be >= 1".into()));
    }
    if config.phases == 0 {
        return Err(CoreError::InvalidParameter("K must be >= 1".into()));
    }
    if env.n_actions() == 0 {
        return Err(CoreError::InvalidParameter("environment has no actions".into()));
    }
    if map.n_actions() != env.n_actions() {
        return Err(CoreError::DimensionMismatch(format!(
            "feature map covers {} actions, environment has {}",
            map.n_actions(),
            env.n_actions()
        )));
    }
    if env.tabular().is_some() && matches!(map, FeatureMap::BlockFourier { .. }) {
        return Err(CoreError::InvalidParameter(
            "block-Fourier features need vector observations; use one-hot features \
             with tabular environments"
                .into(),
        ));
    }
    match config.backend {
        Backend::ReplayUniform { s } | Backend::ReplayCoreset { s } if s == 0 => Err(
            CoreError::InvalidParameter("subsample size s must be >= 1".into()),
        ),
        _ => Ok(()),
    }
}

/// Resolves the return horizon: configured value, or
/// `ceil(log(K tau) / log(1 / gamma))` with `gamma` measured on the uniform
/// policy (tabular environments), clamped to at most a quarter phase.
fn resolve_b(config: &PolitexConfig, mdp: Option<&TabularMdp>) -> Result<usize> {
    if let Some(b) = config.b {
        if b == 0 || b >= config.tau {
            return Err(CoreError::InvalidParameter(format!(
                "b = {b} must be in [1, tau)"
            )));
        }
        return Ok(b);
    }
    let mdp = mdp.ok_or_else(|| {
        CoreError::InvalidParameter(
            "b must be set explicitly for non-tabular environments".into(),
        )
    })?;
    let uniform = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let (_, h) = policy_transition(mdp, &uniform)?;
    let gamma = ergodicity_coefficient(&h);
    if gamma >= 1.0 {
        return Err(CoreError::InvalidParameter(
            "uniform policy does not mix; set b explicitly".into(),
        ));
    }
    let horizon = (config.phases * config.tau).max(10) as f64;
    let b = (horizon.ln() / (1.0 / gamma).ln()).ceil().max(1.0) as usize;
    Ok(b.clamp(1, (config.tau / 4).max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_random_mdp, TabularEnv};
    use crate::estimation::q_value;
    use proptest::prelude::*;

    fn base_config(backend: Backend) -> PolitexConfig {
        PolitexConfig {
            tau: 400,
            phases: 8,
            eta: EtaMode::Auto,
            q_max: 2.0,
            b: None,
            m: None,
            alpha: None,
            return_mode: ReturnMode::Practical,
            backend,
            weight_clip: None,
            buffer_capacity: None,
            strict_invariants: false,
            seed: 7,
        }
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let pi = softmax_policy(&[vec![3.0, 3.0, 3.0]]).unwrap();
        for a in 0..3 {
            assert!((pi.prob(0, a) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // eta * k = ln 2 with Qhat = [1, 0] gives [2/3, 1/3].
        let coeff = std::f64::consts::LN_2;
        let pi = softmax_policy(&[vec![coeff * 1.0, 0.0]]).unwrap();
        assert!((pi.prob(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi.prob(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_policy(&[vec![f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn eta_formula() {
        let eta = compute_eta(100, 1.0, 2).unwrap();
        assert!((eta - (8.0 * 2.0_f64.ln()).sqrt() / 10.0).abs() < 1e-12);
        assert!((eta - 0.23548).abs() < 1e-5);
        // K quadrupled halves eta; Q_max doubled halves eta.
        assert!((compute_eta(400, 1.0, 2).unwrap() - eta / 2.0).abs() < 1e-12);
        assert!((compute_eta(100, 2.0, 2).unwrap() - eta / 2.0).abs() < 1e-12);
        assert!(compute_eta(100, 1.0, 1).is_err());
    }

    #[test]
    fn step_diagnostic_identical_policies() {
        let pi = Policy::uniform(2, 2);
        let q = vec![vec![1.0, -1.0], vec![0.5, 0.0]];
        let (l1, bound) = policy_step_diagnostic(&pi, &pi, 0.3, &q);
        assert_eq!(l1, 0.0);
        assert!(bound >= 0.0);
        assert_eq!(policy_step_violations(&pi, &pi, 0.3, &q, 1e-10), 0);
    }

    #[test]
    fn step_bound_single_state_grid() {
        // pi ∝ exp(eta * k * cumulative Q) for Qhat_pi = [q, 0]: the L1 step
        // between consecutive policies is bounded by eta * q.
        for &eta in &[0.05, 0.2, 1.0, 3.0] {
            for &q in &[0.1, 0.5, 2.0] {
                for k in 1..6 {
                    let prev = softmax_policy(&[vec![eta * (k - 1) as f64 * q, 0.0]]).unwrap();
                    let next = softmax_policy(&[vec![eta * k as f64 * q, 0.0]]).unwrap();
                    let (l1, bound) =
                        policy_step_diagnostic(&prev, &next, eta, &[vec![q, 0.0]]);
                    assert!(
                        l1 <= bound + 1e-12,
                        "eta {eta}, q {q}, k {k}: {l1} > {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn step_vanishes_with_eta() {
        let q = 1.0;
        let mut last = f64::INFINITY;
        for &eta in &[1.0, 0.1, 0.01, 0.001] {
            let prev = softmax_policy(&[vec![0.0, 0.0]]).unwrap();
            let next = softmax_policy(&[vec![eta * q, 0.0]]).unwrap();
            let (l1, _) = policy_step_diagnostic(&prev, &next, eta, &[vec![q, 0.0]]);
            assert!(l1 < last);
            last = l1;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn single_phase_reduction() {
        let mdp = generate_random_mdp(4, 3, 0.05, 51).unwrap();
        let map = FeatureMap::tabular_one_hot(4, 3);
        let mut config = base_config(Backend::WeightAveraging);
        config.phases = 1;
        config.eta = EtaMode::Fixed(0.5);
        let mut env = TabularEnv::new(mdp);
        let out = run(&config, &mut env, &map).unwrap();
        let expected =
            softmax_policy_linear(&map, out.final_weights.weights(), 0.5, 4).unwrap();
        assert_eq!(out.final_policy.unwrap(), expected);
    }

    #[test]
    fn run_is_deterministic() {
        let mdp = generate_random_mdp(5, 3, 0.04, 61).unwrap();
        let map = FeatureMap::tabular_one_hot(5, 3);
        let config = base_config(Backend::ReplayCoreset { s: 50 });
        let a = run(&config, &mut TabularEnv::new(mdp.clone()), &map).unwrap();
        let b = run(&config, &mut TabularEnv::new(mdp), &map).unwrap();
        assert_eq!(
            serde_json::to_string(&a.trace).unwrap(),
            serde_json::to_string(&b.trace).unwrap()
        );
    }

    #[test]
    fn run_respects_step_bound_and_learns() {
        let mdp = generate_random_mdp(5, 3, 0.05, 71).unwrap();
        let map = FeatureMap::tabular_one_hot(5, 3);
        let mut config = base_config(Backend::WeightAveraging);
        config.phases = 16;
        config.strict_invariants = true;
        let out = run(&config, &mut TabularEnv::new(mdp), &map).unwrap();
        assert_eq!(out.trace.mirror_descent_violations, 0);
        // Regret against J* is positive and the last policy beats the first.
        let first = out.trace.records.first().unwrap();
        let last = out.trace.records.last().unwrap();
        assert!(last.cum_regret.unwrap() > 0.0);
        assert!(last.j_pi.unwrap() >= first.j_pi.unwrap());
    }

    #[test]
    fn argmax_follows_cumulative_q() {
        let mdp = generate_random_mdp(4, 3, 0.05, 81).unwrap();
        let map = FeatureMap::tabular_one_hot(4, 3);
        let mut config = base_config(Backend::WeightAveraging);
        config.phases = 6;
        let out = run(&config, &mut TabularEnv::new(mdp), &map).unwrap();
        let pi = out.final_policy.unwrap();
        let w = out.final_weights;
        for x in 0..4 {
            let q_row: Vec<f64> = (0..3)
                .map(|a| q_value(&w, &map.featurize(&Obs::Index(x), a)).unwrap())
                .collect();
            let best_q = (0..3).max_by(|&i, &j| q_row[i].partial_cmp(&q_row[j]).unwrap());
            let best_p = (0..3)
                .max_by(|&i, &j| pi.prob(x, i).partial_cmp(&pi.prob(x, j)).unwrap());
            assert_eq!(best_q, best_p);
        }
    }

    #[test]
    fn q_range_bounded_under_clipping() {
        let mdp = generate_random_mdp(4, 2, 0.05, 91).unwrap();
        let map = FeatureMap::tabular_one_hot(4, 2);
        let mut config = base_config(Backend::WeightAveraging);
        let clip = 5.0;
        config.weight_clip = Some(clip);
        config.phases = 10;
        let out = run(&config, &mut TabularEnv::new(mdp), &map).unwrap();
        // With weight averaging the implied per-phase weights are the
        // clipped per-phase fits, so |Q| <= C_Phi * clip and the range is at
        // most twice that.
        let limit = 2.0 * map.bound() * clip + 1e-9;
        for record in &out.trace.records {
            assert!(record.q_range <= limit, "q_range {}", record.q_range);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Per-state shift invariance of the softmax update.
        #[test]
        fn softmax_shift_invariance(
            q0 in -5.0..5.0f64,
            q1 in -5.0..5.0f64,
            q2 in -5.0..5.0f64,
            shift in -10.0..10.0f64,
        ) {
            let base = softmax_policy(&[vec![q0, q1, q2]]).unwrap();
            let shifted = softmax_policy(&[vec![q0 + shift, q1 + shift, q2 + shift]]).unwrap();
            for a in 0..3 {
                prop_assert!((base.prob(0, a) - shifted.prob(0, a)).abs() < 1e-12);
            }
        }
    }
}
