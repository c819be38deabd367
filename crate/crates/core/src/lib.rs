//! Uncertainty-propagating Monte Carlo tree search for deep exploration in
//! MuZero-style model-based reinforcement learning.

pub mod envs;
pub mod error;
pub mod harness;
pub mod mcts;
pub mod model;
pub mod nn;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
