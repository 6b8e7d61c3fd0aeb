//! Multi-scale deformable mask head.

mod head;
mod mdc;

pub use head::{filter_positive, MaskHead};
pub use mdc::{modulated_deform_conv, Mdc};
