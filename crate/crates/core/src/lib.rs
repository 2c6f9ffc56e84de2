//! Inverse online learning.
//!
//! Recovers an agent's evolving perceived treatment effects from logged
//! `(context, action, outcome)` trajectories with a latent-memory state-space
//! model trained by stochastic variational inference. Also ships a forward
//! simulator of online-learning agents, stationary baselines, evaluation
//! metrics and post-hoc analyses.

pub mod analysis;
pub mod baselines;
pub mod config;
pub mod diff;
pub mod error;
pub mod model;
pub mod seed;
pub mod sim;
pub mod train;
pub mod trajectory;

pub use error::{IolError, Result};
