//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Parameters enter
//! as leaves via [`Graph::param`]; [`Graph::backward`] accumulates gradients
//! additively into per-node slots until [`Graph::zero_grad`] clears them.
//! Broadcasting is limited to trailing-axis bias addition.

pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
