//! Minimal reverse-mode automatic differentiation over dense tensors.

mod conv;
mod ops;
mod tape;
mod tensor;

pub use tape::{GradSink, Gradients, Slot, Tape, Var};
pub use tensor::{Element, Tensor};
