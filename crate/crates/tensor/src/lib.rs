//! Dense `f64` tensors, a reverse-mode differentiation tape and a
//! differentiable singular value decomposition.
//!
//! ```
//! use medflip_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(&x).unwrap().sum();
//! tape.backward(&loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
mod nn;
mod ops;
pub mod svd;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use nn::attention;
pub use ops::{softmax_rows, LOG_CLAMP, NORM_EPS};
pub use svd::{svd, Svd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
