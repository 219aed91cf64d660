//! Replay buffer approximating the average Q-function with a single weight
//! vector.
//!
//! Each phase contributes a weighted sample set; the buffer minimizes the
//! average of per-phase squared losses. Phases can be stored in full,
//! uniformly subsampled (without replacement, weight `tau'/s`), or coreset
//! subsampled (with replacement from `q ∝ residual^2`, weight `1/(s q_t)`),
//! all reproducing the same generic weighted loss.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::estimation::{ridge_solve, WeightEstimate};
use crate::features::FeatureVec;
use crate::mdp::sample_categorical;

/// One stored (features, return) pair with its importance weight.
#[derive(Clone, Debug)]
pub struct ReplaySample {
    pub phi: FeatureVec,
    pub ret: f64,
    pub phase: usize,
    pub weight: f64,
}

/// Samples of one phase plus the bookkeeping needed to evaluate its loss.
#[derive(Clone, Debug)]
pub struct PhaseSlot {
    pub phase: usize,
    /// Number of return samples the phase originally produced; the loss
    /// normalizer of Eq.-style per-phase means.
    pub tau_prime: usize,
    samples: Vec<ReplaySample>,
    /// Sufficient statistics (weighted gram, weighted rhs) cached after the
    /// first fit; invalidated by eviction.
    cached: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl PhaseSlot {
    fn new(phase: usize, tau_prime: usize, samples: Vec<ReplaySample>) -> Self {
        Self {
            phase,
            tau_prime,
            samples,
            cached: None,
        }
    }

    pub fn samples(&self) -> &[ReplaySample] {
        &self.samples
    }

    pub fn weight_sum(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }

    fn stats(&mut self, dim: usize) -> &(DMatrix<f64>, DVector<f64>) {
        if self.cached.is_none() {
            let mut gram = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for s in &self.samples {
                s.phi.add_outer_scaled(&mut gram, s.weight);
                s.phi.add_scaled(&mut rhs, s.weight * s.ret);
            }
            self.cached = Some((gram, rhs));
        }
        self.cached.as_ref().unwrap()
    }
}

/// Weighted mean squared residual of one phase:
/// `(1/tau') sum_t weight_t (w^T phi_t - R_t)^2`.
pub fn phase_loss(weights: &DVector<f64>, samples: &[ReplaySample], tau_prime: usize) -> f64 {
    assert!(tau_prime > 0, "phase loss needs a nonempty phase");
    samples
        .iter()
        .map(|s| {
            let residual = s.phi.dot(weights) - s.ret;
            s.weight * residual * residual
        })
        .sum::<f64>()
        / tau_prime as f64
}

/// Persistent store of per-phase weighted samples.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    slots: Vec<PhaseSlot>,
    capacity: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            slots: Vec::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_phases(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[PhaseSlot] {
        &self.slots
    }

    /// Stores one phase's samples. `tau_prime` is the phase's original
    /// return count (equal to `samples.len()` when storing in full).
    pub fn push_phase(&mut self, phase: usize, tau_prime: usize, samples: Vec<ReplaySample>) {
        self.slots.push(PhaseSlot::new(phase, tau_prime, samples));
    }

    /// Enforces the configured capacity by uniform random eviction.
    pub fn evict_to_capacity(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if let Some(cap) = self.capacity {
            evict(self, cap, rng)?;
        }
        Ok(())
    }

    /// Serializes every sample as one JSONL row `{phase, phi, R, weight}`.
    pub fn export_jsonl<W: std::io::Write>(&self, writer: &mut W) -> Result<()> {
        for slot in &self.slots {
            for s in &slot.samples {
                let row = BufferRow {
                    phase: s.phase,
                    phi: s.phi.to_dense().iter().copied().collect(),
                    ret: s.ret,
                    weight: s.weight,
                };
                serde_json::to_writer(&mut *writer, &row)?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Rebuilds a buffer from [`export_jsonl`](Self::export_jsonl) output.
    /// The per-phase normalizer is recovered as the rounded weight sum (exact
    /// for full and uniform storage, expectation-exact for coresets).
    pub fn import_jsonl<R: std::io::BufRead>(reader: R, capacity: Option<usize>) -> Result<Self> {
        let mut buffer = ReplayBuffer::new(capacity);
        let mut current: Option<(usize, Vec<ReplaySample>)> = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: BufferRow = serde_json::from_str(&line)?;
            let sample = ReplaySample {
                phi: FeatureVec::from_dense(row.phi),
                ret: row.ret,
                phase: row.phase,
                weight: row.weight,
            };
            match current.as_mut() {
                Some((phase, samples)) if *phase == row.phase => samples.push(sample),
                _ => {
                    if let Some((phase, samples)) = current.take() {
                        buffer.finish_import_slot(phase, samples);
                    }
                    current = Some((row.phase, vec![sample]));
                }
            }
        }
        if let Some((phase, samples)) = current.take() {
            buffer.finish_import_slot(phase, samples);
        }
        Ok(buffer)
    }

    fn finish_import_slot(&mut self, phase: usize, samples: Vec<ReplaySample>) {
        let weight_sum: f64 = samples.iter().map(|s| s.weight).sum();
        let tau_prime = (weight_sum.round() as usize).max(1);
        self.push_phase(phase, tau_prime, samples);
    }
}

#[derive(Serialize, Deserialize)]
struct BufferRow {
    phase: usize,
    phi: Vec<f64>,
    #[serde(rename = "R")]
    ret: f64,
    weight: f64,
}

/// Minimizes the averaged per-phase squared losses over the current phase's
/// full data plus the buffer, with ridge `alpha` on the averaged objective:
/// `(1/k) sum_i sum_t w_t (f(phi_t) - R_t)^2 + alpha ||w||^2`.
///
/// With `k = 1` this is exactly [`lsmc_fit`](crate::estimation::lsmc_fit) on
/// the current phase; duplicated phases collapse to the single-phase fit.
pub fn fit_average_q(
    current: &[(FeatureVec, f64)],
    buffer: &mut ReplayBuffer,
    alpha: f64,
    phase: usize,
) -> Result<WeightEstimate> {
    let dim = current
        .first()
        .map(|(phi, _)| phi.dim())
        .or_else(|| {
            buffer
                .slots
                .iter()
                .find_map(|s| s.samples.first().map(|x| x.phi.dim()))
        })
        .ok_or_else(|| CoreError::InvalidParameter("no data to fit".into()))?;

    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (phi, ret) in current {
        if phi.dim() != dim {
            return Err(CoreError::DimensionMismatch(format!(
                "feature dimension {} != {dim}",
                phi.dim()
            )));
        }
        phi.add_outer_scaled(&mut gram, 1.0);
        phi.add_scaled(&mut rhs, *ret);
    }
    let mut k = if current.is_empty() { 0.0 } else { 1.0 };
    for slot in &mut buffer.slots {
        let (slot_gram, slot_rhs) = slot.stats(dim);
        gram += slot_gram;
        rhs += slot_rhs;
        k += 1.0;
    }
    gram /= k;
    rhs /= k;
    let weights = ridge_solve(gram, &rhs, alpha)?;
    Ok(WeightEstimate::new(weights, alpha, phase))
}

/// Uniform subsample of one phase: `s` draws without replacement, each with
/// weight `tau'/s`, so the weighted loss is unbiased for the full-phase loss.
pub fn uniform_subsample(
    data: &[(FeatureVec, f64)],
    phase: usize,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ReplaySample>> {
    let tau_prime = data.len();
    if s == 0 || s > tau_prime {
        return Err(CoreError::InvalidParameter(format!(
            "subsample size {s} outside [1, {tau_prime}]"
        )));
    }
    let weight = tau_prime as f64 / s as f64;
    let picked = rand::seq::index::sample(rng, tau_prime, s);
    Ok(picked
        .iter()
        .map(|idx| ReplaySample {
            phi: data[idx].0.clone(),
            ret: data[idx].1,
            phase,
            weight,
        })
        .collect())
}

/// Coreset subsample of one phase: `s` i.i.d. draws from
/// `q_t ∝ (f(phi_t) - R_t)^2`, each with weight `1/(s q_t)`, the
/// variance-minimizing unbiased estimator for the fixed `f`. All-zero
/// residuals fall back to uniform probabilities.
pub fn coreset_subsample(
    data: &[(FeatureVec, f64)],
    phase: usize,
    s: usize,
    f_weights: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ReplaySample>> {
    let tau_prime = data.len();
    if s == 0 || tau_prime == 0 {
        return Err(CoreError::InvalidParameter(
            "coreset needs s >= 1 and a nonempty phase".into(),
        ));
    }
    let q = coreset_probabilities(data, f_weights);
    Ok((0..s)
        .map(|_| {
            let idx = sample_categorical(rng, &q);
            ReplaySample {
                phi: data[idx].0.clone(),
                ret: data[idx].1,
                phase,
                weight: 1.0 / (s as f64 * q[idx]),
            }
        })
        .collect())
}

/// Sampling distribution used by [`coreset_subsample`].
pub fn coreset_probabilities(data: &[(FeatureVec, f64)], f_weights: &DVector<f64>) -> Vec<f64> {
    let residuals_sq: Vec<f64> = data
        .iter()
        .map(|(phi, ret)| {
            let r = phi.dot(f_weights) - ret;
            r * r
        })
        .collect();
    let total: f64 = residuals_sq.iter().sum();
    if total <= 0.0 {
        vec![1.0 / data.len() as f64; data.len()]
    } else {
        residuals_sq.iter().map(|r| r / total).collect()
    }
}

/// Removes uniformly random samples until the buffer holds at most
/// `capacity`; survivor weights are rescaled per phase so each remaining
/// phase keeps its pre-eviction weight sum. Phases that lose every sample
/// are dropped.
pub fn evict(buffer: &mut ReplayBuffer, capacity: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    if capacity == 0 {
        return Err(CoreError::InvalidParameter("capacity must be >= 1".into()));
    }
    let total = buffer.len();
    if total <= capacity {
        return Ok(());
    }
    // Global sample coordinates in slot order.
    let mut owner = Vec::with_capacity(total);
    for (slot_idx, slot) in buffer.slots.iter().enumerate() {
        for sample_idx in 0..slot.samples.len() {
            owner.push((slot_idx, sample_idx));
        }
    }
    let mut to_remove: Vec<(usize, usize)> = rand::seq::index::sample(rng, total, total - capacity)
        .iter()
        .map(|i| owner[i])
        .collect();
    // Remove back-to-front inside each slot so indices stay valid.
    to_remove.sort_unstable_by(|a, b| b.cmp(a));
    let old_sums: Vec<f64> = buffer.slots.iter().map(|s| s.weight_sum()).collect();
    for (slot_idx, sample_idx) in to_remove {
        buffer.slots[slot_idx].samples.remove(sample_idx);
        buffer.slots[slot_idx].cached = None;
    }
    for (slot, old_sum) in buffer.slots.iter_mut().zip(old_sums) {
        let new_sum = slot.weight_sum();
        if new_sum > 0.0 {
            let factor = old_sum / new_sum;
            for s in slot.samples.iter_mut() {
                s.weight *= factor;
            }
            slot.cached = None;
        }
    }
    buffer.slots.retain(|s| !s.samples.is_empty());
    Ok(())
}
