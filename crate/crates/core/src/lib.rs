//! Distributed tabular Q-learning over a communication graph.
//!
//! Agents share a state, pick a joint action and each receives a private
//! reward. Every agent keeps a full Q-table, averages it with its
//! neighbours through a doubly stochastic gossip matrix and applies a
//! temporal-difference correction at the observed state-action pair.
//!
//! The crate is split along the pipeline:
//!
//! - [`mdp`]: multi-agent MDPs, Bellman operator, value iteration and the
//!   benchmark environments (random MDPs, congestion game).
//! - [`network`]: graphs, lazy Metropolis weights and spectral quantities.
//! - [`sampling`]: i.i.d. and Markovian observation models, stationary
//!   distributions and mixing profiles.
//! - [`learner`]: the distributed Q-learning update and a two-timescale
//!   consensus+innovation baseline.
//! - [`analysis`]: error decomposition, the consensus bound and the
//!   comparison systems that sandwich the averaged iterate.
//! - [`harness`]: configuration, orchestration, CSV traces and the CLI.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod network;
pub mod sampling;

pub use error::{Error, Result};
