//! Dense `f64` tensors and a single-use reverse-mode tape, sized for the
//! small convolutional and MLP networks used in self-supervised training.
//!
//! Values live in [`Tensor`]; a [`Tape`] records operations on them and
//! [`Tape::backward`] returns the gradients of every trainable leaf.
//!
//! ```
//! use byol_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod array;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;

pub use array::Tensor;
pub use error::TensorError;
pub use tape::{BnMode, Gradients, NodeId, RunningStats, Tape, BN_EPS, BN_MOMENTUM, NORM_EPS};
