//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is deliberately small: enough to express a convolutional
//! encoder, a mirrored decoder, softmax heads and the contrastive losses
//! built on top of them. Broadcasting only happens inside the bias-add of
//! [`Tape::linear`] and [`Tape::conv2d`].
//!
//! ```
//! use ufl_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! Arithmetic runs in [`Real`], which is `f32` by default and `f64` with
//! the `f64` feature (and always in this crate's own unit tests).

mod error;
mod gemm;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gemm::{gemm, MatRef};
pub use optim::{accumulate, sgd_step, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Working floating-point type.
#[cfg(any(test, feature = "f64"))]
pub type Real = f64;
/// Working floating-point type.
#[cfg(not(any(test, feature = "f64")))]
pub type Real = f32;
