//! Reward-guided fine-tuning of small diffusion models over synthetic motion.

pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod motion;
pub mod nn;
pub mod reward;
pub mod spl;

pub use error::{Error, Result};
