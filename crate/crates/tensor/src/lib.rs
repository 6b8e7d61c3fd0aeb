//! Dense `f64` tensors with a define-by-run reverse-mode gradient tape.
//!
//! ```
//! use clipseg_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{Backward, Gradients, NodeId, Tape, Var};
pub use tensor::{numel, Tensor};

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    ops::sigmoid_scalar(x)
}

/// Inverse of [`sigmoid`] with the input clamped to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}
