//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] on a scalar result walks the tape once in reverse and
//! returns exact gradients for every leaf. Tapes are cheap and meant to be
//! rebuilt for each training step.
//!
//! ```
//! use activedt_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).item(), 6.0);
//! ```

mod adam;
mod error;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use error::AutodiffError;
pub use params::{BoundParams, ParamStore, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;
