//! Reward-free world-model pretraining and transfer evaluation for a small
//! driving simulator.
//!
//! A recurrent latent world model learns from exploration data gathered by
//! a policy trained purely in imagination on an intrinsic reward (ensemble
//! disagreement, ICM or RND). The frozen exploration policy is evaluated
//! zero-shot on a held-out town, then a task policy is fine-tuned on a small
//! budget of task reward with the world model frozen.

pub mod config;
mod error;
pub mod eval;
pub mod imagination;
pub mod intrinsic;
pub mod nn;
pub mod pipeline;
pub mod protocol;
pub mod replay;
pub mod world_model;

pub use config::{Config, IntrinsicKind, Task};
pub use error::{Error, Result};
