//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod sample;
mod shape;

pub use conv::{conv2d_forward, im2col};
pub use linalg::gemm;
pub use sample::{bilinear_taps, BilinearTaps};

pub(crate) use elementwise::sigmoid as sigmoid_scalar;
