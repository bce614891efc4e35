//! Segmentation-guided world-model reinforcement learning at desk scale.
//!
//! A recurrent latent world model is trained on masked-RGB reconstruction
//! targets, optionally with a selective L2 loss that tolerates errors in
//! approximate task-relevance masks, and an actor-critic is trained on
//! imagined latent rollouts. Synthetic pixel-control environments with
//! procedurally generated distractors provide exact ground-truth masks, and
//! an evaluation kit produces segmentation-quality and return reports.

pub mod agent;
pub mod config;
pub mod envsim;
pub mod checkpoint;
pub mod containers;
pub mod error;
pub mod evalkit;
pub mod maskprov;
pub mod replay;
pub mod trainer;
pub mod worldmodel;
pub mod math;

pub use config::{
    AgentConfig, EnvConfig, MaskProviderConfig, RunConfig, Variant, WorldModelConfig,
};
pub use error::{Result, SdError};
