//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: each operation evaluates eagerly, stores its output and
//! enough context to compute vector-Jacobian products, and returns a [`Var`]
//! handle. [`Graph::backward`] sweeps the tape once in reverse.
//!
//! Parameters live outside the graph. Models register copies of their tensors as
//! leaves for each forward pass and read the gradients back by handle.

mod graph;
pub(crate) mod kernels;

pub use graph::{Gradients, Graph, Var};
