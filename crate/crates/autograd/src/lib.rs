//! Minimal dense-tensor engine with define-by-run reverse-mode differentiation.
//!
//! Every value is a row-major `f64` [`Tensor`]. Operations are recorded on a
//! [`Graph`] arena as they execute; [`Graph::backward`] replays the recorded
//! rules in reverse order and accumulates gradients into every leaf that was
//! created with [`Graph::param`].
//!
//! ```
//! use nighttrack_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
