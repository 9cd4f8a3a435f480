//! Multimodal contrastive learning on three aligned modalities.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! encoder/projector/fusion networks ([`nets`]), the ConFu objective and its
//! baselines ([`objectives`]), a synthetic XOR benchmark with an exact
//! total-correlation oracle ([`synth`]), a deterministic trainer
//! ([`train`]) and pool-based retrieval evaluation ([`eval`]).

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
