//! Exact representation and solution of finite ergodic average-reward MDPs.
//!
//! Everything in this module is deterministic linear algebra on tabular
//! models: gain/bias solves, stationary distributions, ergodicity
//! coefficients, the performance-difference identity, and Howard policy
//! iteration. The learning side of the crate treats these as ground truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance for probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Power-iteration convergence tolerance (L1).
const POWER_ITER_TOL: f64 = 1e-12;
/// Power-iteration budget.
const POWER_ITER_MAX: usize = 1_000_000;
/// `find_optimal_policy` refuses MDPs with more state-action pairs than this.
pub const OPTIMAL_POLICY_SIZE_LIMIT: usize = 20_000;

/// Linear index of a state-action pair, action-major: `a * n_states + x`.
///
/// The same convention orders the rows/columns of state-action transition
/// matrices and the coordinates of tabular one-hot features, so exact Q
/// tables and fitted weight vectors line up coordinate for coordinate.
#[inline]
pub fn sa_index(state: usize, action: usize, n_states: usize) -> usize {
    action * n_states + state
}

/// Draws an index from a (nearly) normalized probability row.
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_distribution_row(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(CoreError::InvalidDistribution(format!(
                "{what}: entry {p} is negative or non-finite"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(CoreError::InvalidDistribution(format!(
            "{what}: row sums to {sum}, expected 1 within {ROW_SUM_TOL:e}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A finite average-reward MDP: transition tensor `P[x][a][x']` and reward
/// table `r[x][a]` with rewards in `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawTabularMdp")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawTabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
}

impl TryFrom<RawTabularMdp> for TabularMdp {
    type Error = CoreError;

    fn try_from(raw: RawTabularMdp) -> Result<Self> {
        TabularMdp::new(raw.n_states, raw.n_actions, raw.transitions, raw.rewards)
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(CoreError::InvalidParameter(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if transitions.len() != n_states || rewards.len() != n_states {
            return Err(CoreError::DimensionMismatch(format!(
                "expected {n_states} state rows, got {} transition / {} reward rows",
                transitions.len(),
                rewards.len()
            )));
        }
        for (x, (trans_row, reward_row)) in transitions.iter().zip(&rewards).enumerate() {
            if trans_row.len() != n_actions || reward_row.len() != n_actions {
                return Err(CoreError::DimensionMismatch(format!(
                    "state {x}: expected {n_actions} actions"
                )));
            }
            for (a, dist) in trans_row.iter().enumerate() {
                if dist.len() != n_states {
                    return Err(CoreError::DimensionMismatch(format!(
                        "P[{x}][{a}] has length {}, expected {n_states}",
                        dist.len()
                    )));
                }
                check_distribution_row(dist, &format!("P[{x}][{a}]"))?;
            }
            for (a, &r) in reward_row.iter().enumerate() {
                if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                    return Err(CoreError::InvalidParameter(format!(
                        "r[{x}][{a}] = {r} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Transition distribution `P(·|x, a)`.
    pub fn transition(&self, state: usize, action: usize) -> &[f64] {
        &self.transitions[state][action]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state][action]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A row-stochastic action-distribution table over states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawPolicy {
    probs: Vec<Vec<f64>>,
}

impl TryFrom<RawPolicy> for Policy {
    type Error = CoreError;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        Policy::from_rows(raw.probs)
    }
}

impl Policy {
    pub fn from_rows(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::InvalidParameter("policy has no states".into()));
        }
        let n_actions = probs[0].len();
        for (x, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(CoreError::DimensionMismatch(format!(
                    "policy row {x} has {} actions, expected {n_actions}",
                    row.len()
                )));
            }
            check_distribution_row(row, &format!("pi[{x}]"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    /// Deterministic policy from an action assignment per state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state][action]
    }

    /// Max over states of the L1 distance between action distributions.
    pub fn l1_distance(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Exact solution of the average-reward Bellman equations for one policy.
///
/// Bias values are normalized so the stationary expectation of `V` is zero.
#[derive(Clone, Debug, Serialize)]
pub struct ExactSolution {
    /// Gain: long-run reward per step.
    pub gain: f64,
    /// Bias values `V[x]`.
    pub state_values: Vec<f64>,
    /// Action values `Q[x][a]`.
    pub action_values: Vec<Vec<f64>>,
    /// Stationary state distribution `mu[x]`.
    pub stationary_state: Vec<f64>,
    /// Stationary state-action distribution `nu[x][a] = mu[x] * pi(a|x)`.
    pub stationary_state_action: Vec<Vec<f64>>,
}

impl ExactSolution {
    /// Q table flattened with [`sa_index`] so it is directly comparable to a
    /// tabular one-hot weight vector.
    pub fn q_weights(&self) -> DVector<f64> {
        let n_states = self.state_values.len();
        let n_actions = self.action_values[0].len();
        let mut w = DVector::zeros(n_states * n_actions);
        for x in 0..n_states {
            for a in 0..n_actions {
                w[sa_index(x, a, n_states)] = self.action_values[x][a];
            }
        }
        w
    }
}

/// One step of a sampled trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

fn check_shapes(mdp: &TabularMdp, policy: &Policy) -> Result<()> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(CoreError::DimensionMismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// State transition matrix `P_pi[x][x'] = sum_a pi(a|x) P(x'|x,a)` and
/// state-action transition matrix
/// `H_pi[(x,a)][(x',a')] = P(x'|x,a) pi(a'|x')`, both row-stochastic.
pub fn policy_transition(mdp: &TabularMdp, policy: &Policy) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states();
    let n_actions = mdp.n_actions();

    let mut p_pi = DMatrix::zeros(n, n);
    for x in 0..n {
        for a in 0..n_actions {
            let w = policy.prob(x, a);
            if w == 0.0 {
                continue;
            }
            for (x_next, &p) in mdp.transition(x, a).iter().enumerate() {
                p_pi[(x, x_next)] += w * p;
            }
        }
    }

    let m = n * n_actions;
    let mut h_pi = DMatrix::zeros(m, m);
    for x in 0..n {
        for a in 0..n_actions {
            let row = sa_index(x, a, n);
            for (x_next, &p) in mdp.transition(x, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a_next in 0..n_actions {
                    h_pi[(row, sa_index(x_next, a_next, n))] = p * policy.prob(x_next, a_next);
                }
            }
        }
    }
    Ok((p_pi, h_pi))
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(matrix: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(CoreError::DimensionMismatch(format!(
            "transition matrix is {}x{}",
            n,
            matrix.ncols()
        )));
    }
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    let mut next = DVector::zeros(n);
    for _ in 0..POWER_ITER_MAX {
        // next = mu^T M, written as column ops to stay allocation-free.
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += mu[i] * matrix[(i, j)];
            }
            next[j] = acc;
        }
        let total: f64 = next.iter().sum();
        next /= total;
        let diff: f64 = mu.iter().zip(next.iter()).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if diff <= POWER_ITER_TOL {
            return Ok(mu);
        }
    }
    Err(CoreError::NonErgodic {
        iterations: POWER_ITER_MAX,
        tolerance: POWER_ITER_TOL,
        coefficient: ergodicity_coefficient(matrix),
    })
}

/// Dobrushin ergodicity coefficient of a row-stochastic matrix:
/// `max {||z^T H||_1 : z^T 1 = 0, ||z||_1 = 1}`.
///
/// The feasible polytope has extreme points `(e_i - e_j) / 2`, so the max is
/// attained at a row pair and equals half the largest pairwise L1 distance.
pub fn ergodicity_coefficient(h: &DMatrix<f64>) -> f64 {
    assert_eq!(h.nrows(), h.ncols(), "ergodicity coefficient needs a square matrix");
    let n = h.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut dist = 0.0;
            for k in 0..n {
                dist += (h[(i, k)] - h[(j, k)]).abs();
            }
            worst = worst.max(0.5 * dist);
        }
    }
    worst.min(1.0)
}

/// Solves the average-reward Bellman equations for `policy`.
///
/// The bias system `(I - P_pi) V = r_pi - J 1` is singular with null space
/// `span{1}`; adding the rank-one term `1 mu^T` pins the representative with
/// `E_mu[V] = 0` and makes the system nonsingular for ergodic chains.
pub fn solve_values(mdp: &TabularMdp, policy: &Policy) -> Result<ExactSolution> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states();
    let n_actions = mdp.n_actions();
    let (p_pi, _) = policy_transition(mdp, policy)?;
    let mu = stationary_distribution(&p_pi)?;

    let r_pi = DVector::from_fn(n, |x, _| {
        (0..n_actions).map(|a| policy.prob(x, a) * mdp.reward(x, a)).sum()
    });
    let gain: f64 = mu.iter().zip(r_pi.iter()).map(|(m, r)| m * r).sum();

    let mut a_mat = DMatrix::identity(n, n) - &p_pi;
    for i in 0..n {
        for j in 0..n {
            a_mat[(i, j)] += mu[j];
        }
    }
    let rhs = &r_pi - DVector::from_element(n, gain);
    let v = a_mat
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CoreError::SingularSystem("bias system is singular".into()))?;

    let residual = (&a_mat * &v - &rhs).amax();
    if residual > 1e-9 {
        return Err(CoreError::SingularSystem(format!(
            "bias solve residual {residual:e} exceeds 1e-9 (chain likely non-ergodic)"
        )));
    }

    let mut q = vec![vec![0.0; n_actions]; n];
    for x in 0..n {
        for a in 0..n_actions {
            let future: f64 = mdp
                .transition(x, a)
                .iter()
                .enumerate()
                .map(|(x_next, &p)| p * v[x_next])
                .sum();
            q[x][a] = mdp.reward(x, a) - gain + future;
        }
    }

    let nu = (0..n)
        .map(|x| (0..n_actions).map(|a| mu[x] * policy.prob(x, a)).collect())
        .collect();

    Ok(ExactSolution {
        gain,
        state_values: v.iter().copied().collect(),
        action_values: q,
        stationary_state: mu.iter().copied().collect(),
        stationary_state_action: nu,
    })
}

/// Both sides of the performance-difference identity:
/// `J_ref - J_pi = E_{x ~ mu_ref}[Q_pi(x, pi_ref) - Q_pi(x, pi)]`.
pub fn performance_difference(
    mdp: &TabularMdp,
    pi_ref: &Policy,
    pi: &Policy,
) -> Result<(f64, f64)> {
    let sol_ref = solve_values(mdp, pi_ref)?;
    let sol = solve_values(mdp, pi)?;
    let lhs = sol_ref.gain - sol.gain;

    let mut rhs = 0.0;
    for x in 0..mdp.n_states() {
        let q_row = &sol.action_values[x];
        let under_ref: f64 = q_row.iter().zip(pi_ref.row(x)).map(|(q, p)| q * p).sum();
        let under_pi: f64 = q_row.iter().zip(pi.row(x)).map(|(q, p)| q * p).sum();
        rhs += sol_ref.stationary_state[x] * (under_ref - under_pi);
    }
    Ok((lhs, rhs))
}

/// Samples a trajectory of `steps` transitions from `start` under `policy`.
pub fn simulate(
    mdp: &TabularMdp,
    policy: &Policy,
    steps: usize,
    start: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    check_shapes(mdp, policy)?;
    if steps == 0 {
        return Err(CoreError::InvalidParameter("steps must be >= 1".into()));
    }
    if start >= mdp.n_states() {
        return Err(CoreError::InvalidParameter(format!(
            "start state {start} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Vec::with_capacity(steps);
    let mut state = start;
    for _ in 0..steps {
        let action = sample_categorical(&mut rng, policy.row(state));
        let reward = mdp.reward(state, action);
        trajectory.push(Transition { state, action, reward });
        state = sample_categorical(&mut rng, mdp.transition(state, action));
    }
    Ok(trajectory)
}

/// Howard policy iteration over deterministic policies. Greedy ties break
/// toward the lowest action index; an action switch requires an improvement
/// above a small threshold so floating-point noise cannot cycle.
pub fn find_optimal_policy(mdp: &TabularMdp) -> Result<(Policy, f64)> {
    find_optimal_policy_with_limit(mdp, OPTIMAL_POLICY_SIZE_LIMIT)
}

/// [`find_optimal_policy`] with an explicit size limit.
pub fn find_optimal_policy_with_limit(mdp: &TabularMdp, limit: usize) -> Result<(Policy, f64)> {
    let size = mdp.n_states() * mdp.n_actions();
    if size > limit {
        return Err(CoreError::SizeLimit { size, limit });
    }
    let n = mdp.n_states();
    let n_actions = mdp.n_actions();
    const SWITCH_TOL: f64 = 1e-10;
    const MAX_SWEEPS: usize = 1_000;

    let mut actions = vec![0usize; n];
    let mut solution = solve_values(mdp, &Policy::deterministic(&actions, n_actions))?;
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for x in 0..n {
            let mut best_a = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let q = solution.action_values[x][a];
                if q > best_q + SWITCH_TOL {
                    best_q = q;
                    best_a = a;
                }
            }
            if best_a != actions[x] && best_q > solution.action_values[x][actions[x]] + SWITCH_TOL {
                actions[x] = best_a;
                changed = true;
            }
        }
        if !changed {
            let policy = Policy::deterministic(&actions, n_actions);
            return Ok((policy, solution.gain));
        }
        solution = solve_values(mdp, &Policy::deterministic(&actions, n_actions))?;
    }
    Err(CoreError::SingularSystem(
        "policy iteration did not converge (non-ergodic or cycling instance)".into(),
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn matrix_from_rows(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows.len();
        let m = rows[0].len();
        DMatrix::from_fn(n, m, |i, j| rows[i][j])
    }

    /// Small random ergodic MDP for tests (every transition entry >= floor).
    pub(crate) fn random_ergodic_mdp(
        n_states: usize,
        n_actions: usize,
        floor: f64,
        seed: u64,
    ) -> TabularMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        let mut rewards = vec![vec![0.0; n_actions]; n_states];
        for x in 0..n_states {
            for a in 0..n_actions {
                let raw: Vec<f64> = (0..n_states)
                    .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
                    .collect();
                let total: f64 = raw.iter().sum();
                let scale = 1.0 - floor * n_states as f64;
                for x_next in 0..n_states {
                    transitions[x][a][x_next] = scale * raw[x_next] / total + floor;
                }
                rewards[x][a] = rng.random();
            }
        }
        TabularMdp::new(n_states, n_actions, transitions, rewards).unwrap()
    }

    pub(crate) fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n_states)
            .map(|_| {
                let raw: Vec<f64> = (0..n_actions)
                    .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            })
            .collect();
        Policy::from_rows(rows).unwrap()
    }

    fn one_state_two_action() -> TabularMdp {
        TabularMdp::new(
            1,
            2,
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn policy_transition_single_state() {
        let mdp = one_state_two_action();
        let (p, h) = policy_transition(&mdp, &Policy::uniform(1, 2)).unwrap();
        assert_eq!(p, matrix_from_rows(&[&[1.0]]));
        assert_eq!(h, matrix_from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]));
    }

    #[test]
    fn policy_transition_action_independent() {
        // P identical across actions: P_pi must equal that shared row set.
        let shared = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        let transitions = shared
            .iter()
            .map(|row| vec![row.clone(), row.clone()])
            .collect();
        let mdp = TabularMdp::new(2, 2, transitions, vec![vec![0.0; 2]; 2]).unwrap();
        let (p, _) = policy_transition(&mdp, &Policy::uniform(2, 2)).unwrap();
        for x in 0..2 {
            for x_next in 0..2 {
                assert!((p[(x, x_next)] - shared[x][x_next]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn policy_transition_rows_stochastic() {
        let mdp = random_ergodic_mdp(2, 2, 0.05, 7);
        let pi = random_policy(2, 2, 11);
        let (p, h) = policy_transition(&mdp, &pi).unwrap();
        for i in 0..2 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
        for i in 0..4 {
            assert!((h.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_transition_shape_mismatch() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 1);
        let err = policy_transition(&mdp, &Policy::uniform(2, 2)).unwrap_err();
        assert!(matches!(err, CoreError::DimensionMismatch(_)));
    }

    #[test]
    fn stationary_symmetric() {
        let m = matrix_from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let mu = stationary_distribution(&m).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-12);
        assert!((mu[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_two_state() {
        // mu^T M = mu^T solved by hand: mu = (2/3, 1/3).
        let m = matrix_from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let mu = stationary_distribution(&m).unwrap();
        assert!((mu[0] - 2.0 / 3.0).abs() < 1e-10);
        assert!((mu[1] - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn stationary_permutation_equivariant() {
        let m = matrix_from_rows(&[&[0.7, 0.2, 0.1], &[0.3, 0.5, 0.2], &[0.1, 0.1, 0.8]]);
        let mu = stationary_distribution(&m).unwrap();
        // Relabel states with the permutation 0->2, 1->0, 2->1.
        let perm = [2usize, 0, 1];
        let mut pm = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                pm[(perm[i], perm[j])] = m[(i, j)];
            }
        }
        let mu_p = stationary_distribution(&pm).unwrap();
        for i in 0..3 {
            assert!((mu_p[perm[i]] - mu[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn stationary_rejects_periodic() {
        // 0 -> 1, 1 -> 2, 2 -> 1: the mass on {1, 2} oscillates forever and
        // the uniform start is not a fixed point.
        let m = matrix_from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        let err = stationary_distribution(&m).unwrap_err();
        assert!(matches!(err, CoreError::NonErgodic { .. }));
    }

    #[test]
    fn ergodicity_examples() {
        let rank_one = matrix_from_rows(&[&[0.2, 0.8], &[0.2, 0.8]]);
        assert_eq!(ergodicity_coefficient(&rank_one), 0.0);
        let identity = DMatrix::<f64>::identity(3, 3);
        assert_eq!(ergodicity_coefficient(&identity), 1.0);
        let h = matrix_from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert!((ergodicity_coefficient(&h) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn solve_constant_reward() {
        let mut mdp = random_ergodic_mdp(3, 2, 0.05, 3);
        for x in 0..3 {
            for a in 0..2 {
                mdp.rewards[x][a] = 0.25;
            }
        }
        let sol = solve_values(&mdp, &random_policy(3, 2, 5)).unwrap();
        assert!((sol.gain - 0.25).abs() < 1e-12);
        for x in 0..3 {
            assert!(sol.state_values[x].abs() < 1e-9);
            for a in 0..2 {
                assert!(sol.action_values[x][a].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn solve_one_state_two_action() {
        let sol = solve_values(&one_state_two_action(), &Policy::uniform(1, 2)).unwrap();
        assert!((sol.gain - 0.5).abs() < 1e-12);
        assert!(sol.state_values[0].abs() < 1e-12);
        assert!((sol.action_values[0][0] + 0.5).abs() < 1e-12);
        assert!((sol.action_values[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn solve_matches_truncated_reward_sums() {
        // Independent oracle for the bias: V(x) is the limit of
        // E[sum_{t<N} (r_t - J) | x_0 = x], evaluated exactly by dynamic
        // programming rather than via the linear solve.
        let mdp = random_ergodic_mdp(4, 2, 0.02, 9);
        let pi = random_policy(4, 2, 10);
        let sol = solve_values(&mdp, &pi).unwrap();
        let (p_pi, _) = policy_transition(&mdp, &pi).unwrap();
        let n = mdp.n_states();
        let r_pi = DVector::from_fn(n, |x, _| {
            (0..2).map(|a| pi.prob(x, a) * mdp.reward(x, a)).sum()
        });

        let mut expected = DVector::zeros(n); // sum of P^t r over t < N
        let mut dist: DMatrix<f64> = DMatrix::identity(n, n); // P^t
        for _ in 0..100_000 {
            expected += &dist * &r_pi;
            dist = &dist * &p_pi;
        }
        for x in 0..n {
            let truncated = expected[x] - 100_000.0 * sol.gain;
            assert!(
                (truncated - sol.state_values[x]).abs() < 1e-2,
                "state {x}: truncated {truncated} vs V {}",
                sol.state_values[x]
            );
        }
    }

    #[test]
    fn solve_bellman_residuals() {
        let mdp = random_ergodic_mdp(5, 3, 0.02, 21);
        let pi = random_policy(5, 3, 22);
        let sol = solve_values(&mdp, &pi).unwrap();
        let n = mdp.n_states();
        // Eq. residuals: Q(x,a) = r - J + sum P V, V(x) = sum_a pi Q.
        for x in 0..n {
            for a in 0..3 {
                let future: f64 = mdp
                    .transition(x, a)
                    .iter()
                    .enumerate()
                    .map(|(y, &p)| p * sol.state_values[y])
                    .sum();
                let residual = sol.action_values[x][a] - (mdp.reward(x, a) - sol.gain + future);
                assert!(residual.abs() < 1e-9);
            }
            let v_from_q: f64 = sol.action_values[x]
                .iter()
                .zip(pi.row(x))
                .map(|(q, p)| q * p)
                .sum();
            assert!((v_from_q - sol.state_values[x]).abs() < 1e-9);
        }
        // Normalization and stationarity.
        let e_mu_v: f64 = sol
            .stationary_state
            .iter()
            .zip(&sol.state_values)
            .map(|(m, v)| m * v)
            .sum();
        assert!(e_mu_v.abs() < 1e-9);
        let (p_pi, _) = policy_transition(&mdp, &pi).unwrap();
        for y in 0..n {
            let pushed: f64 = (0..n).map(|x| sol.stationary_state[x] * p_pi[(x, y)]).sum();
            assert!((pushed - sol.stationary_state[y]).abs() < 1e-10);
        }
    }

    #[test]
    fn performance_difference_identical() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 2);
        let pi = random_policy(3, 2, 4);
        let (lhs, rhs) = performance_difference(&mdp, &pi, &pi).unwrap();
        assert!(lhs.abs() < 1e-12);
        assert!(rhs.abs() < 1e-12);
    }

    #[test]
    fn performance_difference_random_instances() {
        for seed in 0..20 {
            let mdp = random_ergodic_mdp(3, 2, 0.03, 100 + seed);
            let a = random_policy(3, 2, 200 + seed);
            let b = random_policy(3, 2, 300 + seed);
            let (lhs, rhs) = performance_difference(&mdp, &a, &b).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-9,
                "seed {seed}: lhs {lhs} vs rhs {rhs}"
            );
        }
    }

    /// Exhaustive search over deterministic policies, used as the oracle for
    /// `find_optimal_policy` and for optimality of the reference policy.
    pub(crate) fn enumerate_optimal(mdp: &TabularMdp) -> (Policy, f64) {
        let n = mdp.n_states();
        let n_actions = mdp.n_actions();
        let mut best: Option<(Policy, f64)> = None;
        let total = n_actions.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let actions: Vec<usize> = (0..n)
                .map(|_| {
                    let a = c % n_actions;
                    c /= n_actions;
                    a
                })
                .collect();
            let pi = Policy::deterministic(&actions, n_actions);
            let gain = solve_values(mdp, &pi).unwrap().gain;
            if best.as_ref().map_or(true, |(_, g)| gain > *g) {
                best = Some((pi, gain));
            }
        }
        best.unwrap()
    }

    #[test]
    fn optimal_reference_dominates() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 13);
        let (pi_star, _) = enumerate_optimal(&mdp);
        for seed in 0..10 {
            let pi = random_policy(3, 2, 400 + seed);
            let (lhs, _) = performance_difference(&mdp, &pi_star, &pi).unwrap();
            assert!(lhs >= -1e-10, "optimal policy must not be dominated");
        }
    }

    #[test]
    fn simulate_deterministic_unroll() {
        // Deterministic 3-cycle with action-0 policy.
        let transitions = vec![
            vec![vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
            vec![vec![1.0, 0.0, 0.0]],
        ];
        let rewards = vec![vec![0.1], vec![0.2], vec![0.3]];
        let mdp = TabularMdp::new(3, 1, transitions, rewards).unwrap();
        let pi = Policy::deterministic(&[0, 0, 0], 1);
        let traj = simulate(&mdp, &pi, 5, 0, 99).unwrap();
        let states: Vec<usize> = traj.iter().map(|t| t.state).collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1]);
        let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![0.1, 0.2, 0.3, 0.1, 0.2]);
    }

    #[test]
    fn simulate_seed_determinism() {
        let mdp = random_ergodic_mdp(4, 3, 0.02, 31);
        let pi = random_policy(4, 3, 32);
        let a = simulate(&mdp, &pi, 1000, 1, 77).unwrap();
        let b = simulate(&mdp, &pi, 1000, 1, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_mean_reward_matches_gain() {
        let mdp = random_ergodic_mdp(4, 2, 0.05, 41);
        let pi = random_policy(4, 2, 42);
        let gain = solve_values(&mdp, &pi).unwrap().gain;
        let traj = simulate(&mdp, &pi, 1_000_000, 0, 4242).unwrap();
        let mean: f64 = traj.iter().map(|t| t.reward).sum::<f64>() / traj.len() as f64;
        // Standard error from batch means (100 batches) to absorb the
        // autocorrelation of the chain.
        let batch = 10_000;
        let batch_means: Vec<f64> = traj
            .chunks(batch)
            .map(|c| c.iter().map(|t| t.reward).sum::<f64>() / batch as f64)
            .collect();
        let bm = batch_means.iter().sum::<f64>() / batch_means.len() as f64;
        let var = batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>()
            / (batch_means.len() - 1) as f64;
        let se = (var / batch_means.len() as f64).sqrt();
        assert!(
            (mean - gain).abs() <= 3.0 * se.max(1e-5),
            "mean {mean} vs gain {gain}, se {se}"
        );
    }

    #[test]
    fn optimal_single_state() {
        let (pi, gain) = find_optimal_policy(&one_state_two_action()).unwrap();
        assert_eq!(pi.prob(0, 1), 1.0);
        assert!((gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_matches_enumeration() {
        for seed in 0..5 {
            let mdp = random_ergodic_mdp(3, 2, 0.04, 500 + seed);
            let (_, gain_enum) = enumerate_optimal(&mdp);
            let (_, gain_pi) = find_optimal_policy(&mdp).unwrap();
            assert!(
                (gain_enum - gain_pi).abs() < 1e-9,
                "seed {seed}: enumeration {gain_enum} vs policy iteration {gain_pi}"
            );
        }
    }

    #[test]
    fn optimal_invariant_to_reward_shift() {
        let mdp = random_ergodic_mdp(3, 2, 0.04, 77);
        let (pi, gain) = find_optimal_policy(&mdp).unwrap();
        let shift = 0.2;
        let shifted_rewards = mdp
            .rewards
            .iter()
            .map(|row| row.iter().map(|r| r * 0.5 + shift).collect())
            .collect();
        let shifted = TabularMdp::new(3, 2, mdp.transitions.clone(), shifted_rewards).unwrap();
        let (pi_s, gain_s) = find_optimal_policy(&shifted).unwrap();
        assert_eq!(pi, pi_s);
        assert!((gain_s - (gain * 0.5 + shift)).abs() < 1e-9);
    }

    #[test]
    fn optimal_size_limit() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 1);
        let err = find_optimal_policy_with_limit(&mdp, 5).unwrap_err();
        assert!(matches!(err, CoreError::SizeLimit { size: 6, limit: 5 }));
    }

    #[test]
    fn mdp_json_round_trip() {
        let mdp = random_ergodic_mdp(3, 2, 0.03, 8);
        let text = mdp.to_json().unwrap();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(mdp.transitions, back.transitions);
        assert_eq!(mdp.rewards, back.rewards);
        // Bit-stable second round trip.
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn mdp_rejects_bad_rows() {
        let bad = TabularMdp::new(
            1,
            1,
            vec![vec![vec![0.9]]],
            vec![vec![0.5]],
        );
        assert!(matches!(bad, Err(CoreError::InvalidDistribution(_))));
        let bad_reward = TabularMdp::new(1, 1, vec![vec![vec![1.0]]], vec![vec![1.5]]);
        assert!(matches!(bad_reward, Err(CoreError::InvalidParameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Contraction: ||(H^m)^T (nu1 - nu2)||_1 <= gamma(H)^m ||nu1 - nu2||_1.
        #[test]
        fn contraction_bound(seed in 0u64..1_000_000, m in prop::sample::select(vec![1usize, 2, 5])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (rng.random::<u64>() % 4) as usize;
            let mut rows = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                rows.push(raw.into_iter().map(|v| v / total).collect::<Vec<_>>());
            }
            let h = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
            let gamma = ergodicity_coefficient(&h);

            let draw_dist = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                DVector::from_vec(raw.into_iter().map(|v| v / total).collect::<Vec<_>>())
            };
            let nu1 = draw_dist(&mut rng);
            let nu2 = draw_dist(&mut rng);

            let mut hm = DMatrix::<f64>::identity(n, n);
            for _ in 0..m {
                hm = &hm * &h;
            }
            let pushed = hm.transpose() * (&nu1 - &nu2);
            let lhs: f64 = pushed.iter().map(|v| v.abs()).sum();
            let rhs: f64 = gamma.powi(m as i32)
                * (&nu1 - &nu2).iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!(lhs <= rhs + 1e-12, "lhs {lhs} > rhs {rhs}");
        }
    }
}
