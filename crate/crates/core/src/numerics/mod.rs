//! Dense tensors, a reverse-mode tape, and the finite-difference oracle.

mod fd;
mod graph;
mod params;
mod tensor;

#[cfg(test)]
mod gradcheck_tests;

pub use fd::{finite_difference_gradients, finite_difference_jacobian, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use params::{Binder, NamedTensors, Parameter, ParameterSet};
pub use tensor::{attention_weights, masked_self_attention, softmax_rows, validate_mask, Scalar, Tensor, MASK_BLOCKED};
