//! Distributional flow critic laboratory.
//!
//! A flow-matching model over scalar returns learns the distributional
//! Bellman target, a one-step quantile critic is distilled from it, and a
//! flow-regularized one-step actor climbs the critic's mean. Everything runs
//! on a small dense-network substrate with reverse-mode differentiation.

pub mod critic;
pub mod envs;
mod error;
pub mod flow;
pub mod harness;
pub mod nn;
pub mod oracles;
pub mod policy;

pub use error::{Error, Result};
pub use nn::{Mlp, Tensor};
