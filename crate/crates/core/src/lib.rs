//! Masked image modelling for volumetric images.
//!
//! The crate covers the full pipeline: volume I/O and preprocessing
//! ([`volume`]), cube-based corruption ([`corruption`]), a small tensor engine
//! ([`neuralops`]), the convolutional masked autoencoder and downstream
//! classifiers ([`architecture`]), training loops and checkpoints
//! ([`trainer`]), evaluation statistics ([`metrics`]), and synthetic phantoms
//! ([`synthdata`]).

pub mod architecture;
pub mod corruption;
pub mod error;
pub mod json;
pub mod metrics;
pub mod neuralops;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
