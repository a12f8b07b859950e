//! Dense `f64` tensors with a tape-based reverse mode.

mod kernels;
mod tape;
mod tensor;

pub use kernels::dot;
pub use tape::{sigmoid, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
