//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Activation, Tape, Var, LEAKY_SLOPE, SPHERE_EPS};
pub use tensor::Tensor;
