//! Feature maps for linear Q-approximation.
//!
//! Both built-in maps produce block-structured vectors: the feature vector is
//! partitioned into one block per action, the block for the taken action
//! holds the state features, and all other blocks are zero. [`FeatureVec`]
//! stores only the live block, which keeps replay buffers and Gram-matrix
//! updates cheap.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::Obs;
use crate::error::{CoreError, Result};
use crate::mdp::{sa_index, solve_values, Policy, TabularMdp};

/// A feature vector whose nonzero entries form one contiguous block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVec {
    dim: usize,
    offset: usize,
    values: Vec<f64>,
}

impl FeatureVec {
    pub fn new(dim: usize, offset: usize, values: Vec<f64>) -> Self {
        assert!(offset + values.len() <= dim, "block exceeds dimension");
        Self { dim, offset, values }
    }

    /// Treats a dense vector as one full-width block.
    pub fn from_dense(values: Vec<f64>) -> Self {
        Self {
            dim: values.len(),
            offset: 0,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Inner product with a dense weight vector.
    pub fn dot(&self, weights: &DVector<f64>) -> f64 {
        assert_eq!(weights.len(), self.dim, "dimension mismatch in dot product");
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v * weights[self.offset + i])
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (i, &v) in self.values.iter().enumerate() {
            out[self.offset + i] = v;
        }
        out
    }

    /// `gram += scale * phi phi^T`, touching only the live block.
    pub fn add_outer_scaled(&self, gram: &mut DMatrix<f64>, scale: f64) {
        debug_assert_eq!(gram.nrows(), self.dim);
        for (i, &vi) in self.values.iter().enumerate() {
            let row = self.offset + i;
            for (j, &vj) in self.values.iter().enumerate() {
                gram[(row, self.offset + j)] += scale * vi * vj;
            }
        }
    }

    /// `out += scale * phi`.
    pub fn add_scaled(&self, out: &mut DVector<f64>, scale: f64) {
        debug_assert_eq!(out.len(), self.dim);
        for (i, &v) in self.values.iter().enumerate() {
            out[self.offset + i] += scale * v;
        }
    }
}

/// Fourier basis layout: cosine features on states normalized to `[0, 1]`
/// per coordinate, multi-indices from the full grid `{0..order}^dim`
/// truncated by total order to cap the dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierSpec {
    pub order: usize,
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
}

impl FourierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(CoreError::InvalidParameter("Fourier order must be >= 1".into()));
        }
        if self.state_low.len() != self.state_high.len() || self.state_low.is_empty() {
            return Err(CoreError::DimensionMismatch(
                "state_low and state_high must be equal-length and nonempty".into(),
            ));
        }
        for (i, (lo, hi)) in self.state_low.iter().zip(&self.state_high).enumerate() {
            if !(lo < hi) {
                return Err(CoreError::InvalidParameter(format!(
                    "coordinate {i}: low {lo} must be < high {hi}"
                )));
            }
        }
        Ok(())
    }

    fn multi_indices(&self) -> Vec<Vec<usize>> {
        let dim = self.state_low.len();
        let mut out = Vec::new();
        let mut current = vec![0usize; dim];
        loop {
            if current.iter().sum::<usize>() <= self.order {
                out.push(current.clone());
            }
            // Odometer over the full grid {0..order}^dim.
            let mut pos = 0;
            loop {
                if pos == dim {
                    return out;
                }
                current[pos] += 1;
                if current[pos] <= self.order {
                    break;
                }
                current[pos] = 0;
                pos += 1;
            }
        }
    }
}

/// Feature map `phi(x, a)` with a known norm bound.
#[derive(Clone, Debug)]
pub enum FeatureMap {
    TabularOneHot {
        n_states: usize,
        n_actions: usize,
    },
    BlockFourier {
        spec: FourierSpec,
        n_actions: usize,
        multi_indices: Vec<Vec<usize>>,
        clamp_events: Arc<AtomicU64>,
    },
}

impl FeatureMap {
    pub fn tabular_one_hot(n_states: usize, n_actions: usize) -> Self {
        FeatureMap::TabularOneHot { n_states, n_actions }
    }

    pub fn block_fourier(spec: FourierSpec, n_actions: usize) -> Result<Self> {
        spec.validate()?;
        let multi_indices = spec.multi_indices();
        Ok(FeatureMap::BlockFourier {
            spec,
            n_actions,
            multi_indices,
            clamp_events: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn dimension(&self) -> usize {
        match self {
            FeatureMap::TabularOneHot { n_states, n_actions } => n_states * n_actions,
            FeatureMap::BlockFourier {
                multi_indices,
                n_actions,
                ..
            } => multi_indices.len() * n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            FeatureMap::TabularOneHot { n_actions, .. } => *n_actions,
            FeatureMap::BlockFourier { n_actions, .. } => *n_actions,
        }
    }

    /// Norm bound `C_Phi`: 1 for one-hot, sqrt(block size) for Fourier.
    pub fn bound(&self) -> f64 {
        match self {
            FeatureMap::TabularOneHot { .. } => 1.0,
            FeatureMap::BlockFourier { multi_indices, .. } => (multi_indices.len() as f64).sqrt(),
        }
    }

    /// Number of observations that fell outside the declared state bounds
    /// and were clamped.
    pub fn clamp_events(&self) -> u64 {
        match self {
            FeatureMap::TabularOneHot { .. } => 0,
            FeatureMap::BlockFourier { clamp_events, .. } => clamp_events.load(Ordering::Relaxed),
        }
    }

    /// Computes `phi(x, a)`.
    pub fn featurize(&self, obs: &Obs, action: usize) -> FeatureVec {
        assert!(action < self.n_actions(), "action index out of range");
        let phi = match self {
            FeatureMap::TabularOneHot { n_states, n_actions } => {
                let state = obs
                    .index()
                    .expect("tabular one-hot features need index observations");
                assert!(state < *n_states, "state index out of range");
                FeatureVec::new(
                    n_states * n_actions,
                    sa_index(state, action, *n_states),
                    vec![1.0],
                )
            }
            FeatureMap::BlockFourier {
                spec,
                n_actions,
                multi_indices,
                clamp_events,
            } => {
                let state = match obs {
                    Obs::Vector(v) => v,
                    Obs::Index(_) => panic!("block-Fourier features need vector observations"),
                };
                assert_eq!(state.len(), spec.state_low.len(), "state dimension mismatch");
                let mut clamped = false;
                let normalized: Vec<f64> = state
                    .iter()
                    .zip(spec.state_low.iter().zip(&spec.state_high))
                    .map(|(&s, (&lo, &hi))| {
                        let z = (s - lo) / (hi - lo);
                        if !(0.0..=1.0).contains(&z) {
                            clamped = true;
                        }
                        z.clamp(0.0, 1.0)
                    })
                    .collect();
                if clamped {
                    clamp_events.fetch_add(1, Ordering::Relaxed);
                }
                let block: Vec<f64> = multi_indices
                    .iter()
                    .map(|c| {
                        let phase: f64 = c
                            .iter()
                            .zip(&normalized)
                            .map(|(&ci, &z)| ci as f64 * z)
                            .sum();
                        (std::f64::consts::PI * phase).cos()
                    })
                    .collect();
                let block_len = block.len();
                FeatureVec::new(block_len * n_actions, action * block_len, block)
            }
        };
        debug_assert!(
            phi.norm() <= self.bound() + 1e-9,
            "feature norm {} exceeds bound {}",
            phi.norm(),
            self.bound()
        );
        phi
    }
}

/// Smallest eigenvalue of the exact stationary second-moment matrix
/// `E_{(x,a) ~ nu_pi}[phi phi^T]` for arbitrary tabular-state features.
pub fn feature_excitation_with<F>(
    mdp: &TabularMdp,
    policy: &Policy,
    dim: usize,
    feats: F,
) -> Result<f64>
where
    F: Fn(usize, usize) -> FeatureVec,
{
    let solution = solve_values(mdp, policy)?;
    let mut second_moment = DMatrix::zeros(dim, dim);
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let weight = solution.stationary_state_action[x][a];
            if weight == 0.0 {
                continue;
            }
            feats(x, a).add_outer_scaled(&mut second_moment, weight);
        }
    }
    let eigen = second_moment.symmetric_eigen();
    Ok(eigen.eigenvalues.min())
}

/// [`feature_excitation_with`] for a [`FeatureMap`] over index observations.
pub fn feature_excitation(mdp: &TabularMdp, policy: &Policy, map: &FeatureMap) -> Result<f64> {
    feature_excitation_with(mdp, policy, map.dimension(), |x, a| {
        map.featurize(&Obs::Index(x), a)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests::{random_ergodic_mdp, random_policy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_indicator_position() {
        let map = FeatureMap::tabular_one_hot(2, 2);
        let phi = map.featurize(&Obs::Index(1), 0);
        let dense = phi.to_dense();
        assert_eq!(dense.len(), 4);
        // Action-major blocks: index = a * n_states + x.
        for i in 0..4 {
            let expected = if i == sa_index(1, 0, 2) { 1.0 } else { 0.0 };
            assert_eq!(dense[i], expected);
        }
    }

    #[test]
    fn fourier_at_origin_is_all_ones() {
        let spec = FourierSpec {
            order: 1,
            state_low: vec![0.0],
            state_high: vec![1.0],
        };
        let map = FeatureMap::block_fourier(spec, 1).unwrap();
        let phi = map.featurize(&Obs::Vector(vec![0.0]), 0);
        let dense = phi.to_dense();
        assert_eq!(dense.len(), 2);
        for v in dense.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn blocks_are_disjoint() {
        let spec = FourierSpec {
            order: 2,
            state_low: vec![0.0, -1.0],
            state_high: vec![1.0, 1.0],
        };
        let map = FeatureMap::block_fourier(spec, 3).unwrap();
        let obs = Obs::Vector(vec![0.4, 0.2]);
        for a in 0..3 {
            for a2 in 0..3 {
                let dot = map.featurize(&obs, a).to_dense().dot(&map.featurize(&obs, a2).to_dense());
                if a == a2 {
                    assert!(dot > 0.0);
                } else {
                    assert_eq!(dot, 0.0);
                }
            }
        }
    }

    #[test]
    fn fourier_dimension_is_total_order_truncated() {
        // dim 2, order 2: multi-indices with c1 + c2 <= 2 -> C(4, 2) = 6.
        let spec = FourierSpec {
            order: 2,
            state_low: vec![0.0, 0.0],
            state_high: vec![1.0, 1.0],
        };
        let map = FeatureMap::block_fourier(spec, 2).unwrap();
        assert_eq!(map.dimension(), 12);
        assert!((map.bound() - 6.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fourier_bound_never_exceeded() {
        let spec = FourierSpec {
            order: 3,
            state_low: vec![-2.0, -5.0, -2.0, -8.0],
            state_high: vec![2.0, 5.0, 2.0, 8.0],
        };
        let map = FeatureMap::block_fourier(spec, 5).unwrap();
        let bound = map.bound();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100_000 {
            let state: Vec<f64> = (0..4).map(|_| (rng.random::<f64>() - 0.5) * 30.0).collect();
            let action = (rng.random::<u64>() % 5) as usize;
            let phi = map.featurize(&Obs::Vector(state), action);
            assert!(phi.norm() <= bound + 1e-12);
        }
        // Out-of-range states were clamped, not rejected.
        assert!(map.clamp_events() > 0);
    }

    #[test]
    fn one_hot_realizes_exact_q() {
        let mdp = random_ergodic_mdp(4, 3, 0.03, 23);
        let pi = random_policy(4, 3, 24);
        let sol = solve_values(&mdp, &pi).unwrap();
        let w = sol.q_weights();
        let map = FeatureMap::tabular_one_hot(4, 3);
        for x in 0..4 {
            for a in 0..3 {
                let q_hat = map.featurize(&Obs::Index(x), a).dot(&w);
                assert!((q_hat - sol.action_values[x][a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn excitation_one_hot_is_min_stationary_mass() {
        let mdp = random_ergodic_mdp(3, 2, 0.05, 31);
        let pi = random_policy(3, 2, 32);
        let sol = solve_values(&mdp, &pi).unwrap();
        let min_nu = sol
            .stationary_state_action
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let map = FeatureMap::tabular_one_hot(3, 2);
        let lambda = feature_excitation(&mdp, &pi, &map).unwrap();
        assert!((lambda - min_nu).abs() < 1e-12);
    }

    #[test]
    fn excitation_uniform_one_hot() {
        // Doubly stochastic uniform chain: nu uniform -> lambda = 1/(X*A).
        let n = 3;
        let uniform_row = vec![1.0 / n as f64; n];
        let transitions = vec![vec![uniform_row.clone(); 2]; n];
        let mdp = TabularMdp::new(n, 2, transitions, vec![vec![0.5; 2]; n]).unwrap();
        let map = FeatureMap::tabular_one_hot(n, 2);
        let lambda = feature_excitation(&mdp, &Policy::uniform(n, 2), &map).unwrap();
        assert!((lambda - 1.0 / 6.0).abs() < 1e-10);
    }

    #[test]
    fn excitation_matches_dense_oracle() {
        // d = 2 random features; eigenvalues of the 2x2 second moment by the
        // quadratic formula, fully independent of the eigensolver.
        let mdp = random_ergodic_mdp(3, 2, 0.05, 41);
        let pi = random_policy(3, 2, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random(), rng.random()]).collect();
        let lookup = |x: usize, a: usize| FeatureVec::from_dense(feats[x * 2 + a].clone());

        let sol = solve_values(&mdp, &pi).unwrap();
        let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
        for x in 0..3 {
            for a in 0..2 {
                let nu = sol.stationary_state_action[x][a];
                let f = &feats[x * 2 + a];
                m00 += nu * f[0] * f[0];
                m01 += nu * f[0] * f[1];
                m11 += nu * f[1] * f[1];
            }
        }
        let tr = m00 + m11;
        let det = m00 * m11 - m01 * m01;
        let expected = 0.5 * (tr - (tr * tr - 4.0 * det).sqrt());

        let lambda = feature_excitation_with(&mdp, &pi, 2, lookup).unwrap();
        assert!((lambda - expected).abs() < 1e-10);
    }
}
