//! The extrapolation network.
//!
//! Sub-6 CSI enters as `M^s` tokens of `2K^s` real features. A temporal
//! encoder turns the delay-domain view into a gating latent, the fusion
//! block attends over the projected tokens and mixes experts chosen by that
//! latent, a stack of deep blocks refines the result, and a factorized
//! output map produces the `M^m × 2K^m` mmWave tokens.

mod checkpoint;
mod config;
mod features;
pub mod layers;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{Dims, ModelConfig, Variant};
pub use features::{csi_to_real, delay_features, real_to_csi, NormStats, MIN_STD};
pub use layers::{top_k_mask, GateDecision};
pub use model::{Block, Forward, MdfceModel, ModelInput, Tfem};

#[cfg(test)]
mod tests;
