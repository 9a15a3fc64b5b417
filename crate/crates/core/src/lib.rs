//! Inverse-Q* reward imitation on exactly enumerable token MDPs.
//!
//! The crate is organised around small, fully enumerable token processes so
//! every quantity the training procedure relies on can be checked against a
//! brute-force oracle:
//!
//! - [`policy`]: tabular and feed-forward autoregressive policies, sampling,
//!   exhaustive rollout into [`policy::SequenceDistribution`].
//! - [`env`]: synthetic terminal rewards, shaped token rewards, Bradley-Terry
//!   preference probabilities and exact KL-regularized values.
//! - [`estimator`]: contrastive next-token estimate, closed-form KL-optimal
//!   policy, implicit reward.
//! - [`credit`]: prefix values, per-token credit and the two verification oracles.
//! - [`trainers`]: Inverse-Q*, token-level PPO and DPO.
//! - [`eval`]: oracle-judged win rates, Elo, smoothing, alpha sweeps.
//! - [`config`], [`checkpoint`], [`experiment`]: run orchestration used by the CLI.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod credit;
pub mod env;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod experiment;
pub mod numeric;
pub mod policy;
pub mod rng;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
