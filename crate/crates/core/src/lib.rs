//! Tandem reinforcement learning laboratory.
//!
//! An *active* Double-DQN agent interacts with a small control environment while a
//! *passive* agent of identical architecture learns from the very same data stream
//! without ever choosing actions. The crate provides the environments, a manual
//! backpropagation MLP, replay and target machinery, an orchestrator for every
//! tandem and forked-tandem protocol, the diagnostics computed on each run, and
//! exact tabular oracles used to validate the numeric core.

pub mod agent;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod rng;
pub mod sweep;
pub mod tandem;

pub use error::{Error, Result};
