//! Cross-band channel extrapolation for dual-band massive MIMO.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, gradient checking.
//! * [`channel`]: paired sub-6 GHz / mmWave CSI synthesis, AWGN, delay-domain
//!   transforms and the dataset file format.
//! * [`net`]: the extrapolation network (temporal feature encoder, fusion
//!   block with attention and a gated mixture of experts, deep interaction
//!   stack, output projection).
//! * [`train`]: losses, AdamW, the training loop, the pilot-based LS
//!   baseline, FLOP accounting and NMSE evaluation.
//! * [`par`]: data-parallel helpers with a sequential fallback.

pub mod channel;
pub mod digest;
pub mod error;
pub mod net;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
