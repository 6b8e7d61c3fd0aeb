//! Clip-level video instance segmentation built on temporal multi-scale
//! deformable attention.

pub mod attention;
pub mod clip;
pub mod error;
pub mod io;
pub mod mask;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod tracker;

pub use clip::{ClipLayout, FeatureClip};
pub use error::{CoreError, Result};
pub use params::{Bound, ParamStore};
