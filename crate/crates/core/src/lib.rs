//! Constraint-rectified training of reasoning-length policies.
//!
//! The crate trains a small stochastic policy over reasoning traces so that
//! traces get shorter while accuracy stays within a tolerance of a frozen
//! reference policy. Everything runs on a synthetic arithmetic-chain
//! environment whose latent grid is small enough to enumerate, so every
//! expectation and gradient has an exact oracle next to its sampled estimator.
//!
//! Module map:
//!
//! - [`types`]: prompts, traces, rollout groups, policy parameters, snapshots.
//! - [`env`]: trace sampling, deterministic rendering and the answer verifier.
//! - [`norm`]: per-prompt logistic length normalization (live and frozen).
//! - [`grad`]: score-function estimators, enumeration oracles, SGD.
//! - [`trainer`]: the switching rule, two-stage scheduler and primal-dual baseline.
//! - [`metrics`]: pass@1, AES, gzip redundancy and the stability table.
//! - [`harness`]: configuration, checkpoints, run orchestration and CLI commands.

pub mod env;
pub mod error;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod norm;
pub mod rng;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
