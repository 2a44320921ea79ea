//! Dyna-style model-based reinforcement learning with an uncertainty-aware,
//! policy-guided MPC planner.

pub mod error;
pub mod buffers;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod envs;
pub mod metrics;
pub mod numerics;
pub mod planner;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
