//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! A [`Graph`] is built node by node, evaluated against named leaf
//! [`Bindings`], and differentiated with [`Graph::backward`]. The
//! [`gradcheck`] module compares those gradients to central finite
//! differences in 64-bit precision.

mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{GraphError, TensorError};
pub use gradcheck::{compare_gradients, finite_difference, grad_check, GradReport, ParamError};
pub use graph::{Bindings, Gradients, Graph, NodeId};
pub use tensor::{Real, Tensor};
