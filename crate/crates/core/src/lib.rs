//! Regularized policy iteration (Politex) for average-reward MDPs with linear
//! value-function approximation.
//!
//! The crate is organized around the phases of the algorithm:
//!
//! - [`mdp`] — exact representation and solution of finite ergodic
//!   average-reward MDPs (gain, bias, stationary distributions, ergodicity
//!   coefficients). These solvers act as ground-truth oracles for everything
//!   the learning side estimates.
//! - [`env`] — environments the driver can run against: tabular MDPs
//!   (generated or loaded), a reward-chain, and a discrete-force cart-pole.
//! - [`features`] — feature maps for linear Q-approximation: tabular one-hot
//!   and block-Fourier, with boundedness and excitation diagnostics.
//! - [`estimation`] — per-phase least-squares Monte Carlo policy evaluation
//!   (b-step returns, block schedules, ridge fits) and weight averaging.
//! - [`replay`] — persistent replay buffer approximating the average
//!   Q-function with a single weight vector; uniform and coreset
//!   subsampling, capacity eviction.
//! - [`politex`] — the phased driver: execute the current policy, estimate
//!   the average Q-function with a pluggable backend, apply the
//!   mirror-descent softmax update.
//! - [`experiment`] — file-based orchestration: configs, seeded repeats,
//!   JSONL traces, summary CSV.
//! - [`checks`] — the property suite the CLI `check` subcommand and the
//!   acceptance tests share.

pub mod checks;
pub mod env;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod features;
pub mod mdp;
pub mod politex;
pub mod replay;

pub use error::{CoreError, Result};
