//! Deterministic dense linear algebra, activations, and reverse-mode
//! automatic differentiation for the rest of the crate.

pub mod activation;
pub mod autodiff;
pub mod f32kernels;
pub mod matrix;

pub use activation::{activation, sigmoid, softmax_rows, Activation};
pub use autodiff::{Gradients, MaskKind, NodeId, Tape};
pub use matrix::{rel_err, rel_frobenius, Matrix};
