//! Monostatic ISAC downlink simulator and a DDPG agent for joint transmit
//! beamforming and power allocation.
//!
//! The crate is organised bottom-up:
//!
//! - [`array`]: UCA geometry and steering vectors
//! - [`scenario`]: users, clusters, target trajectory and channel draws
//! - [`metrics`]: SINR, spectral efficiency, optimal receive filter, reward
//! - [`env`]: state encoding, power projection and the episode loop
//! - [`neural`]: dense networks with explicit backprop, Adam, soft updates
//! - [`agent`]: replay buffer and the DDPG learner
//! - [`baselines`]: random policy, MRT warm start and the codebook DQN
//! - [`rollout`]: training and evaluation episode loops
//! - [`history`]: step, episode and evaluation records as CSV
//! - [`run`]: configuration and the train/eval/sweep/bench drivers

// `!(x > 0.0)` style checks are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod array;
pub mod baselines;
pub mod env;
pub mod error;
pub mod history;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod rollout;
pub mod run;
pub mod scenario;

pub use error::{Error, Result};
