//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Build a [`Graph`] per forward pass, register inputs with
//! [`Graph::constant`] or [`Graph::param`], compose operations, and call
//! [`Graph::backward`] on a scalar result.

mod graph;
mod value;

pub use graph::{logsumexp, Gradients, Graph, Reduce, Var};
pub use value::Tensor;
