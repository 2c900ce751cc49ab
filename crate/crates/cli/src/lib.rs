//! Command-line workflows around the SELD core: synthetic scenes, feature
//! caching, training and VTM finetuning, inference, evaluation and
//! attention analysis.

pub mod augment;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
