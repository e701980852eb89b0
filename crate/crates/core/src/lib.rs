//! Bayesian reward inference from ranked demonstrations, classical Bayesian
//! IRL, and high-confidence policy evaluation over the reward posterior.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`]: deterministic gridworlds, exact solvers, policies, rollouts
//!   and feature expectations.
//! * [`demos`]: ground-truth rewards, demonstrations and preference data.
//! * [`embed`]: self-supervised pretraining of a dense state encoder.
//! * [`brex`] and [`birl`]: the two posterior samplers, sharing
//!   [`chain`].
//! * [`hcpe`]: posterior returns, δ-VaR bounds and policy ranking.
//! * [`uq`]: ensemble and MC-dropout baselines on the linear reward head.
//! * [`experiment`]: the gridworld ablations and throughput benchmark.

pub mod birl;
pub mod brex;
pub mod chain;
pub mod demos;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod hcpe;
pub mod mdp;
pub mod rng;
pub mod uq;

pub use chain::{McmcConfig, PosteriorChain};
pub use demos::PreferenceDataset;
pub use error::{Error, Result};
pub use mdp::{GridWorld, RewardWeights, StochasticPolicy, Trajectory};
