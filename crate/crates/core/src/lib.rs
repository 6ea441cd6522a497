//! Resilient multi-UAV coverage simulation and multi-agent PPO training with a
//! topology-aware graph-attention critic.

pub mod baselines;
pub mod channel;
pub mod env;
pub mod harness;
pub mod metrics;
pub mod mobility;
pub mod nn;
pub mod power;
pub mod rng;
pub mod train;
pub mod world;
