//! Training-free latent image composition over pluggable diffusion-model
//! interfaces.
//!
//! The pipeline inverts a background and a placed foreground into noisy
//! latents, merges them at a chosen initiation index, and refines the
//! composite inside a timestep window through per-channel adaptive
//! normalization and energy-guided latent optimization, with the region
//! outside the object maintained from the background trajectory by
//! replacement. Analytic and trainable desk-scale backends keep every
//! operation verifiable against independent oracles.

pub mod compose;
pub mod config;
pub mod energy;
pub mod error;
pub mod io;
pub mod manifest;
pub mod masks;
pub mod metrics;
pub mod models;
pub mod schedule;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
