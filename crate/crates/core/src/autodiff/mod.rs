//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended after their inputs, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep that visits each
//! node once. Graphs are cheap and meant to be rebuilt for every forward.

mod graph;
mod ops;

pub use graph::{BnStats, Gradients, Graph, NormMode, Var};
pub use ops::{sigmoid, silu, softplus, BinaryKind, UnaryKind, SOFTPLUS_THRESHOLD};
