//! Command-line pipeline around the `voxmim` library: phantom synthesis,
//! preprocessing, masked pre-training, downstream training, evaluation,
//! method comparison and the full results grid.
//!
//! Phase seeds derive from the master seed with `derive_seed(master, tag)`:
//!
//! | tag | use |
//! |-----|-----|
//! | `synth` | phantom generation |
//! | `split` | stratified train/test split |
//! | `mae-init/<r>`, `pretrain/<r>` | autoencoder weights and pre-training of replicate `r` |
//! | `fraction/<f>/<r>` | label-fraction subsample, shared by all methods |
//! | `classifier/<f>/<r>` | classifier initialisation |
//! | `downstream/<f>/<r>` | downstream batch order |
//! | `bootstrap/<f>/<r>`, `bootstrap` | bootstrap index sets, shared by all methods |
//!
//! Standalone `pretrain` and `train` use replicate `0`.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod reproduce;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
