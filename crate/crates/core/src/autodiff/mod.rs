//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod conv;
mod tape;
mod tensor;

pub use tape::{softmax_in_place, Tape, Var, L2_EPS};
pub use tensor::Tensor;
