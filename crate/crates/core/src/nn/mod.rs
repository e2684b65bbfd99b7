//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod adam;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use params::{Gradients, Param, ParamId, ParamSet, Sgd};
pub use tape::{affine, nll, softmax_t, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
