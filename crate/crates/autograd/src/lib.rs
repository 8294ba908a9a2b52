//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`]
//! replays them in reverse and leaves `d loss / d node` on every node that
//! depends on a [`Tape::param`]. The operation set is exactly what the
//! registration network needs: products, elementwise arithmetic, masked
//! softmax, batch/layer normalization, grouped max pooling, index gathers
//! with a zero row for missing neighbours, and a 3x3 SVD with its
//! differential.
//!
//! ```
//! use bhreg_autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
//! let loss = tape.squared_norm(x);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod scalar;
pub mod svd;
mod tape;
mod tensor;

pub use error::{AutogradError, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::Tensor;
