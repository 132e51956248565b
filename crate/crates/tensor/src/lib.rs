//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Every backward rule is itself built from recorded tensor ops, so
//! [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again (needed for gradient-penalty objectives).

mod autograd;
mod conv;
mod float;
mod ops;
mod optim;
mod shape;
mod tensor;

pub use autograd::grad;
pub use conv::Conv2dConfig;
pub use float::Float;
pub use optim::Adam;
pub use tensor::{no_grad, NoGradGuard, Tensor};
