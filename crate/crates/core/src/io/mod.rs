//! On-disk formats owned by the model: mask dumps and checkpoints.

pub mod checkpoint;
pub mod masks;

pub use checkpoint::Checkpoint;
pub use masks::{BinaryMask, SoftMask};
