//! Minimal reverse-mode automatic differentiation over dense 2D tensors.
//!
//! The whole training stack runs on this module: graphs are built per
//! sequence, evaluated forward, and differentiated backward. Generic over
//! [`Scalar`] so tests and gradient checks run in f64 while training runs
//! in f32.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{Graph, Mode, NodeId, NumericsError};
pub use tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, real, Scalar, Tensor};
