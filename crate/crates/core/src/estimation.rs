//! Per-phase least-squares Monte Carlo policy evaluation.
//!
//! A phase's trajectory is turned into centered b-step returns, which are
//! ridge-regressed onto features. Two return layouts exist: the analysis
//! layout places returns only at odd-block starts of a block schedule, the
//! practical layout uses every step. Weight averaging across phases
//! estimates the average Q-function in the linear case.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::env::Obs;
use crate::error::{CoreError, Result};
use crate::features::FeatureVec;

/// One logged environment step.
#[derive(Clone, Debug)]
pub struct PhaseStep {
    pub obs: Obs,
    pub action: usize,
    pub reward: f64,
}

/// Data collected while executing one policy for `tau` steps.
///
/// `episode_ends` holds the positions one past the last step of each episode
/// that terminated inside the phase; steps after the last entry belong to an
/// unfinished trailing segment (always the case for continuing environments).
#[derive(Clone, Debug)]
pub struct PhaseDataset {
    pub phase_index: usize,
    pub steps: Vec<PhaseStep>,
    pub episode_ends: Vec<usize>,
}

/// A b-step return anchored at step `t`. `truncated` marks returns cut short
/// by an episode boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnSample {
    pub t: usize,
    pub value: f64,
    pub truncated: bool,
}

/// How returns and the empirical gain are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// All steps carry returns; the gain is the all-steps mean.
    Practical,
    /// Returns only at odd-block starts; the gain from even-block starts.
    Analysis,
}

impl PhaseDataset {
    pub fn new(phase_index: usize, steps: Vec<PhaseStep>, episode_ends: Vec<usize>) -> Self {
        Self {
            phase_index,
            steps,
            episode_ends,
        }
    }

    /// Continuing-trajectory dataset (no episode boundaries).
    pub fn continuing(phase_index: usize, steps: Vec<PhaseStep>) -> Self {
        Self::new(phase_index, steps, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// All-steps mean reward (the practical-mode gain estimate).
    pub fn empirical_gain_practical(&self) -> Result<f64> {
        if self.steps.is_empty() {
            return Err(CoreError::InvalidParameter("empty phase".into()));
        }
        Ok(self.steps.iter().map(|s| s.reward).sum::<f64>() / self.steps.len() as f64)
    }

    /// Mean reward over even-block starts (the analysis-mode gain estimate).
    pub fn empirical_gain_analysis(&self, schedule: &BlockSchedule) -> Result<f64> {
        empirical_gain(&self.rewards(), schedule)
    }

    /// Practical-mode returns: one per step of every finished episode
    /// (truncated at the episode boundary when needed) plus every step of
    /// the unfinished tail whose full b-window fits inside the phase.
    pub fn returns_practical(&self, b: usize, j_hat: f64) -> Result<Vec<ReturnSample>> {
        if b == 0 {
            return Err(CoreError::InvalidParameter("b must be >= 1".into()));
        }
        let n = self.steps.len();
        if b >= n {
            return Err(CoreError::InvalidParameter(format!(
                "b = {b} must be smaller than the phase length {n}"
            )));
        }
        // prefix[i] = sum of rewards before step i.
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for s in &self.steps {
            prefix.push(prefix.last().unwrap() + s.reward);
        }
        let centered = |t: usize, end: usize| {
            let count = (end - t + 1) as f64;
            prefix[end + 1] - prefix[t] - count * j_hat
        };

        let mut out = Vec::new();
        let mut segment_start = 0;
        for &end in &self.episode_ends {
            for t in segment_start..end {
                let full_end = t + b;
                let capped = full_end.min(end - 1);
                out.push(ReturnSample {
                    t,
                    value: centered(t, capped),
                    truncated: capped < full_end,
                });
            }
            segment_start = end;
        }
        // Unfinished tail: only full windows.
        if segment_start < n {
            for t in segment_start..n {
                if t + b >= n {
                    break;
                }
                out.push(ReturnSample {
                    t,
                    value: centered(t, t + b),
                    truncated: false,
                });
            }
        }
        Ok(out)
    }

    /// Analysis-mode returns at odd-block starts. Episode boundaries are
    /// ignored; this layout is meant for continuing tabular runs.
    pub fn returns_analysis(&self, schedule: &BlockSchedule, j_hat: f64) -> Result<Vec<ReturnSample>> {
        let rewards = self.rewards();
        b_step_returns_at(&rewards, schedule.b, j_hat, &schedule.odd_starts)
    }

    /// Streams the dataset as JSONL rows `{t, x, a, r, R}`; `R` is null for
    /// steps that carry no return.
    pub fn export_jsonl<W: std::io::Write>(
        &self,
        returns: &[ReturnSample],
        writer: &mut W,
    ) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            t: usize,
            x: &'a Obs,
            a: usize,
            r: f64,
            #[serde(rename = "R")]
            ret: Option<f64>,
        }
        let mut by_t = vec![None; self.steps.len()];
        for rs in returns {
            by_t[rs.t] = Some(rs.value);
        }
        for (t, step) in self.steps.iter().enumerate() {
            let row = Row {
                t,
                x: &step.obs,
                a: step.action,
                r: step.reward,
                ret: by_t[t],
            };
            serde_json::to_writer(&mut *writer, &row)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Block schedule
// ---------------------------------------------------------------------------

/// Partition of a phase into `2m` blocks of size `b`: odd blocks start at
/// `{0, 2b, 4b, ...}`, even blocks at `{b, 3b, ...}` (phase-relative).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSchedule {
    pub b: usize,
    pub m: usize,
    pub odd_starts: Vec<usize>,
    pub even_starts: Vec<usize>,
}

pub fn block_schedule(tau: usize, b: usize, m: usize) -> Result<BlockSchedule> {
    if b == 0 || m == 0 {
        return Err(CoreError::InvalidParameter(
            "block size and block count must be >= 1".into(),
        ));
    }
    if 2 * m * b > tau {
        return Err(CoreError::InvalidParameter(format!(
            "2*m*b = {} exceeds phase length {tau}",
            2 * m * b
        )));
    }
    let odd_starts = (0..m).map(|i| 2 * i * b).collect();
    let even_starts = (0..m).map(|i| (2 * i + 1) * b).collect();
    Ok(BlockSchedule {
        b,
        m,
        odd_starts,
        even_starts,
    })
}

/// Mean reward over even-block starts.
pub fn empirical_gain(rewards: &[f64], schedule: &BlockSchedule) -> Result<f64> {
    if schedule.even_starts.is_empty() {
        return Err(CoreError::InvalidParameter("empty even-block index set".into()));
    }
    let mut sum = 0.0;
    for &t in &schedule.even_starts {
        if t >= rewards.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "even-block start {t} outside phase of length {}",
                rewards.len()
            )));
        }
        sum += rewards[t];
    }
    Ok(sum / schedule.even_starts.len() as f64)
}

/// Centered b-step returns `R_t = sum_{j=t}^{t+b} (r_j - j_hat)` at the given
/// anchor steps.
pub fn b_step_returns_at(
    rewards: &[f64],
    b: usize,
    j_hat: f64,
    anchors: &[usize],
) -> Result<Vec<ReturnSample>> {
    if b == 0 {
        return Err(CoreError::InvalidParameter("b must be >= 1".into()));
    }
    if b >= rewards.len() {
        return Err(CoreError::InvalidParameter(format!(
            "b = {b} must be smaller than the phase length {}",
            rewards.len()
        )));
    }
    anchors
        .iter()
        .map(|&t| {
            if t + b >= rewards.len() {
                return Err(CoreError::InvalidParameter(format!(
                    "return window [{t}, {}] leaves the phase", t + b
                )));
            }
            let value = rewards[t..=t + b].iter().map(|r| r - j_hat).sum();
            Ok(ReturnSample {
                t,
                value,
                truncated: false,
            })
        })
        .collect()
}

/// Centered b-step returns at every valid anchor of a continuing trajectory.
pub fn b_step_returns(rewards: &[f64], b: usize, j_hat: f64) -> Result<Vec<ReturnSample>> {
    if b == 0 {
        return Err(CoreError::InvalidParameter("b must be >= 1".into()));
    }
    if b >= rewards.len() {
        return Err(CoreError::InvalidParameter(format!(
            "b = {b} must be smaller than the phase length {}",
            rewards.len()
        )));
    }
    let anchors: Vec<usize> = (0..rewards.len() - b).collect();
    b_step_returns_at(rewards, b, j_hat, &anchors)
}

// ---------------------------------------------------------------------------
// Ridge fits and weight averaging
// ---------------------------------------------------------------------------

/// A fitted weight vector with its ridge parameter and provenance.
#[derive(Clone, Debug)]
pub struct WeightEstimate {
    weights: DVector<f64>,
    pub alpha: f64,
    /// Phase the estimate was produced in (for averages, the latest phase).
    pub phase: usize,
    /// True when the fit was norm-clipped.
    pub clipped: bool,
}

impl WeightEstimate {
    pub fn new(weights: DVector<f64>, alpha: f64, phase: usize) -> Self {
        Self {
            weights,
            alpha,
            phase,
            clipped: false,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), 0.0, 0)
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn norm(&self) -> f64 {
        self.weights.norm()
    }

    /// Scales the vector down to `max_norm` when it exceeds it.
    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm {
            self.weights *= max_norm / norm;
            self.clipped = true;
        }
    }
}

/// Solves `(gram + alpha I) w = rhs` with a residual check.
pub(crate) fn ridge_solve(
    mut gram: DMatrix<f64>,
    rhs: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    if alpha < 0.0 {
        return Err(CoreError::InvalidParameter("ridge alpha must be >= 0".into()));
    }
    let d = gram.nrows();
    for i in 0..d {
        gram[(i, i)] += alpha;
    }
    let solution = gram
        .clone()
        .cholesky()
        .map(|chol| chol.solve(rhs))
        .or_else(|| gram.clone().lu().solve(rhs))
        .ok_or_else(|| {
            CoreError::SingularSystem(
                "normal equations are singular (set alpha > 0 or provide richer data)".into(),
            )
        })?;
    let residual = (&gram * &solution - rhs).norm();
    if residual > 1e-8 * (1.0 + rhs.norm()) {
        return Err(CoreError::SingularSystem(format!(
            "ridge solve residual {residual:e} too large; system is near-singular"
        )));
    }
    Ok(solution)
}

/// Exact ridge regression of returns onto features:
/// `w = (sum phi phi^T + alpha I)^{-1} sum phi R`.
pub fn lsmc_fit(samples: &[(FeatureVec, f64)], alpha: f64, phase: usize) -> Result<WeightEstimate> {
    let dim = samples
        .first()
        .map(|(phi, _)| phi.dim())
        .ok_or_else(|| CoreError::InvalidParameter("no samples to fit".into()))?;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (phi, ret) in samples {
        if phi.dim() != dim {
            return Err(CoreError::DimensionMismatch(format!(
                "feature dimension {} != {dim}",
                phi.dim()
            )));
        }
        phi.add_outer_scaled(&mut gram, 1.0);
        phi.add_scaled(&mut rhs, *ret);
    }
    let weights = ridge_solve(gram, &rhs, alpha)?;
    Ok(WeightEstimate::new(weights, alpha, phase))
}

/// Arithmetic mean of weight vectors.
pub fn average_weights(estimates: &[WeightEstimate]) -> Result<WeightEstimate> {
    let first = estimates
        .first()
        .ok_or_else(|| CoreError::InvalidParameter("no estimates to average".into()))?;
    let dim = first.dim();
    let mut mean = DVector::zeros(dim);
    for est in estimates {
        if est.dim() != dim {
            return Err(CoreError::DimensionMismatch(format!(
                "estimate dimension {} != {dim}",
                est.dim()
            )));
        }
        mean += est.weights();
    }
    mean /= estimates.len() as f64;
    Ok(WeightEstimate::new(
        mean,
        first.alpha,
        estimates.last().unwrap().phase,
    ))
}

/// Linear action value `w^T phi`.
pub fn q_value(estimate: &WeightEstimate, phi: &FeatureVec) -> Result<f64> {
    if phi.dim() != estimate.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "feature dimension {} != weight dimension {}",
            phi.dim(),
            estimate.dim()
        )));
    }
    Ok(phi.dot(estimate.weights()))
}

/// Default ridge strength `sqrt(tau / K)`.
pub fn default_alpha(tau: usize, phases: usize) -> f64 {
    (tau as f64 / phases as f64).sqrt()
}
