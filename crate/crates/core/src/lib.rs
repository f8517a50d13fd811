//! Behavior-supported policy optimization on small enumerable token MDPs.
//!
//! The crate covers the exact tabular theory (supported Bellman operators,
//! policy iteration, brute-force oracles) and a desk-scale RLHF pipeline:
//! synthetic gold and proxy rewards, PPO with a behavior-supported critic,
//! and the usual reward-hacking baselines.

pub mod behavior;
pub mod error;
pub mod metrics_io;
pub mod policy;
pub mod prove;
pub mod reward_lab;
pub mod rl_engine;
pub mod rng;
pub mod scenario;
pub mod seq_mdp;
pub mod supported_pi;
pub mod value_ops;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
