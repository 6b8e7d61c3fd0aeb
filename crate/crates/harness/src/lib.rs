//! Synthetic data, training, inference, evaluation and tooling around the
//! clip-level segmentation model.

pub mod attndump;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod infer;
pub mod manifest;
pub mod optim;
pub mod synth;
mod text;
pub mod trackfile;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
