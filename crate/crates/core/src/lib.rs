//! Unsupervised cross-domain image retrieval built on two ideas: a frozen
//! text-to-image denoiser disentangles object features from domain styles
//! through the prompt's learnable object token, and a progressive
//! contrastive schedule aligns those features from augmented views to
//! in-domain mutual neighbors to cross-domain mutual neighbors.
//!
//! The crate ships a pluggable denoiser contract with an analytic linear
//! backend and a synthetic two-domain world, so the whole pipeline is
//! verifiable at desk scale against brute-force oracles.

pub mod alignment;
pub mod binio;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod manifest;
pub mod math;
pub mod nn;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
