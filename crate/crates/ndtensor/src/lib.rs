//! Dense `f64` tensors with a tape-based reverse-mode differentiation engine.
//!
//! ```
//! use ndtensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), Some(6.0));
//! ```
//!
//! Only scalar-with-tensor broadcasting is supported. Every primitive checks
//! its output for NaN/Inf and reports [`TensorError::NonFinite`].

mod error;
pub mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{sigmoid, softmax_along, CustomOp, ElemOp, ReduceOp, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
