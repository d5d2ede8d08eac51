//! Reverse-mode automatic differentiation over a dynamic graph.
//!
//! Every op on [`Tensor`] that touches a tensor requiring grad records a node
//! pointing at its parents. [`grad`] walks that graph backwards. Backward
//! rules are expressed with the same ops, so gradients taken with
//! `create_graph = true` can be differentiated again, which is what the
//! input-gradient matching objective needs.

mod check;
mod grad;
mod ops;
pub mod sparse;
mod tensor;

pub use check::finite_difference_check;
pub use grad::grad;
pub use ops::concat;
pub use tensor::{is_grad_enabled, no_grad, set_grad_enabled, GradModeGuard, Tensor};

#[cfg(test)]
mod tests;
