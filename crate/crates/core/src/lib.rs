//! Crystal-plasticity texture evolution with goal-conditioned deep Q-learning.
//!
//! The crate simulates a Taylor-type polycrystal under sequences of small
//! deformation steps and trains DQN agents that steer the crystallographic
//! texture toward target orientation distributions. Texture state is encoded
//! with symmetrized generalized spherical harmonics, and progress is measured
//! by a chi-square distance between orientation histograms on a near-uniform
//! grid over the cubic fundamental zone.

pub mod error;
pub mod gsh_features;
pub mod odf_histogram;
pub mod orientation_space;
pub mod process_env;
pub mod q_network;
pub mod replay_memory;
pub mod rl_agents;
pub mod taylor_model;

pub use error::{Error, Result};
