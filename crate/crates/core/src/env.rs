//! Environments the Politex driver can run against.
//!
//! Tabular environments expose their underlying [`TabularMdp`] so the driver
//! can compute exact per-phase diagnostics; the cart-pole is a continuous
//! four-dimensional system with a discrete force set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mdp::{sample_categorical, TabularMdp};

/// Observation: a discrete state index or a continuous state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    Index(usize),
    Vector(Vec<f64>),
}

impl Obs {
    pub fn index(&self) -> Option<usize> {
        match self {
            Obs::Index(i) => Some(*i),
            Obs::Vector(_) => None,
        }
    }
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Observation after the transition.
    pub obs: Obs,
    /// Reward for the step that was just taken.
    pub reward: f64,
    /// True when an episode boundary follows this step (driver must reset).
    pub episode_end: bool,
}

/// A stateful environment stepped by the driver. All randomness comes from
/// the caller's RNG so runs are reproducible.
pub trait Environment {
    fn n_actions(&self) -> usize;
    /// Length of vector observations; 1 for index observations.
    fn obs_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Obs;
    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> StepOutcome;
    /// Exact model when it exists (tabular environments only).
    fn tabular(&self) -> Option<&TabularMdp> {
        None
    }
}

// ---------------------------------------------------------------------------
// Tabular environment
// ---------------------------------------------------------------------------

/// Continuing environment backed by an exact tabular model.
pub struct TabularEnv {
    mdp: TabularMdp,
    state: usize,
    start_state: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self {
            mdp,
            state: 0,
            start_state: 0,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Obs {
        self.state = self.start_state;
        Obs::Index(self.state)
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> StepOutcome {
        let reward = self.mdp.reward(self.state, action);
        self.state = sample_categorical(rng, self.mdp.transition(self.state, action));
        StepOutcome {
            obs: Obs::Index(self.state),
            reward,
            episode_end: false,
        }
    }

    fn tabular(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Random ergodic MDP with a uniform mixing floor.
///
/// Each transition row is `(1 - eps * n) * Dirichlet(1, ..., 1) + eps`, so
/// every entry is at least `eps` and every policy's chain mixes. Rewards are
/// uniform on `[0, 1]`.
pub fn generate_random_mdp(
    n_states: usize,
    n_actions: usize,
    mixing_floor: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(CoreError::InvalidParameter(
            "need at least one state and one action".into(),
        ));
    }
    let max_floor = 1.0 / n_states as f64;
    if !(mixing_floor > 0.0 && mixing_floor <= max_floor) {
        return Err(CoreError::InvalidParameter(format!(
            "mixing floor {mixing_floor} outside (0, {max_floor}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 - mixing_floor * n_states as f64;
    let mut transitions = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut rewards = vec![vec![0.0; n_actions]; n_states];
    for x in 0..n_states {
        for a in 0..n_actions {
            // Dirichlet(1,...,1) via normalized Exp(1) draws.
            let raw: Vec<f64> = (0..n_states)
                .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
                .collect();
            let total: f64 = raw.iter().sum();
            for x_next in 0..n_states {
                transitions[x][a][x_next] = scale * raw[x_next] / total + mixing_floor;
            }
            // Renormalize the tail entry to absorb rounding.
            let sum: f64 = transitions[x][a].iter().sum();
            transitions[x][a][n_states - 1] += 1.0 - sum;
            rewards[x][a] = rng.random();
        }
    }
    TabularMdp::new(n_states, n_actions, transitions, rewards)
}

/// A reward chain: action 1 walks right toward the rewarding end, action 0
/// walks left. Rows are blended with a small uniform component so every
/// policy is ergodic. Reward depends on position only.
pub fn chain_mdp(n_states: usize) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(CoreError::InvalidParameter(
            "chain needs at least two states".into(),
        ));
    }
    const SLIP: f64 = 0.1;
    const MIX: f64 = 0.02;
    let n = n_states;
    let mut transitions = vec![vec![vec![0.0; n]; 2]; n];
    let mut rewards = vec![vec![0.0; 2]; n];
    for x in 0..n {
        let left = x.saturating_sub(1);
        let right = (x + 1).min(n - 1);
        transitions[x][0][left] += 1.0 - SLIP;
        transitions[x][0][right] += SLIP;
        transitions[x][1][right] += 1.0 - SLIP;
        transitions[x][1][left] += SLIP;
        for a in 0..2 {
            for p in transitions[x][a].iter_mut() {
                *p = (1.0 - MIX * n as f64) * *p + MIX;
            }
            let sum: f64 = transitions[x][a].iter().sum();
            transitions[x][a][n - 1] += 1.0 - sum;
            rewards[x][a] = x as f64 / (n - 1) as f64;
        }
    }
    TabularMdp::new(n, 2, transitions, rewards)
}

// ---------------------------------------------------------------------------
// Cart-pole
// ---------------------------------------------------------------------------

/// Cart-pole physical constants and episode bookkeeping.
///
/// Dynamics are the classic cart-and-rod equations integrated with
/// semi-implicit Euler. The discrete action set is a list of force values,
/// scaled by `force_gain` newtons per unit. The per-step reward is
/// `(1 + cos(theta)) / 2`; a reward below `fail_reward` or leaving the track
/// counts as a fall, after which the remaining steps of the 1000-step
/// episode yield zero reward.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleConfig {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length (distance from pivot to center of mass).
    pub half_length: f64,
    pub timestep: f64,
    /// Discrete force set in force units.
    pub forces: Vec<f64>,
    /// Newtons applied per force unit.
    pub force_gain: f64,
    pub episode_len: usize,
    pub track_limit: f64,
    /// Fall indicator: a step reward below this ends the live part of the
    /// episode.
    pub fail_reward: f64,
    /// Initial state noise half-width (uniform on all four coordinates).
    pub init_noise: f64,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            timestep: 0.01,
            forces: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            force_gain: 5.0,
            episode_len: 1000,
            track_limit: 2.4,
            fail_reward: 0.5,
            init_noise: 0.05,
        }
    }
}

/// State: `[x, x_dot, theta, theta_dot]`, `theta = 0` pointing up.
pub struct CartPoleEnv {
    config: CartPoleConfig,
    state: [f64; 4],
    steps_in_episode: usize,
    failed: bool,
}

impl CartPoleEnv {
    pub fn new(config: CartPoleConfig) -> Self {
        Self {
            config,
            state: [0.0; 4],
            steps_in_episode: 0,
            failed: false,
        }
    }

    pub fn config(&self) -> &CartPoleConfig {
        &self.config
    }

    /// One semi-implicit Euler step of the cart-pole dynamics under `force`
    /// (newtons). Exposed so the integrator can be tested directly.
    pub fn integrate(config: &CartPoleConfig, state: [f64; 4], force: f64) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = state;
        let total_mass = config.cart_mass + config.pole_mass;
        let polemass_length = config.pole_mass * config.half_length;
        let (sin_t, cos_t) = theta.sin_cos();

        let temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass;
        let theta_acc = (config.gravity * sin_t - cos_t * temp)
            / (config.half_length * (4.0 / 3.0 - config.pole_mass * cos_t * cos_t / total_mass));
        let x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

        let dt = config.timestep;
        let x_dot_new = x_dot + dt * x_acc;
        let theta_dot_new = theta_dot + dt * theta_acc;
        [
            x + dt * x_dot_new,
            x_dot_new,
            theta + dt * theta_dot_new,
            theta_dot_new,
        ]
    }

    /// Total mechanical energy of a state (kinetic of cart and rod plus the
    /// rod's potential energy about the pivot height).
    pub fn energy(config: &CartPoleConfig, state: [f64; 4]) -> f64 {
        let [_, x_dot, theta, theta_dot] = state;
        let mc = config.cart_mass;
        let mp = config.pole_mass;
        let l = config.half_length;
        0.5 * (mc + mp) * x_dot * x_dot
            + mp * l * x_dot * theta_dot * theta.cos()
            + (2.0 / 3.0) * mp * l * l * theta_dot * theta_dot
            + mp * config.gravity * l * theta.cos()
    }

    fn reward_of(&self, theta: f64) -> f64 {
        (0.5 * (1.0 + theta.cos())).clamp(0.0, 1.0)
    }

    fn fail_threshold(&self) -> f64 {
        self.config.fail_reward
    }
}

impl Environment for CartPoleEnv {
    fn n_actions(&self) -> usize {
        self.config.forces.len()
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Obs {
        let w = self.config.init_noise;
        for v in self.state.iter_mut() {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * w;
        }
        self.steps_in_episode = 0;
        self.failed = false;
        Obs::Vector(self.state.to_vec())
    }

    fn step(&mut self, action: usize, _rng: &mut ChaCha8Rng) -> StepOutcome {
        assert!(action < self.config.forces.len(), "action out of range");
        let reward = if self.failed {
            0.0
        } else {
            let force = self.config.forces[action] * self.config.force_gain;
            self.state = Self::integrate(&self.config, self.state, force);
            let r = self.reward_of(self.state[2]);
            if r < self.fail_threshold() || self.state[0].abs() > self.config.track_limit {
                self.failed = true;
            }
            r
        };
        self.steps_in_episode += 1;
        let episode_end = self.steps_in_episode >= self.config.episode_len;
        StepOutcome {
            obs: Obs::Vector(self.state.to_vec()),
            reward,
            episode_end,
        }
    }
}
