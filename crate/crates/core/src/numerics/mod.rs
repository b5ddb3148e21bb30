//! Dense tensors, reverse-mode differentiation and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{elu, gelu, sigmoid, softmax_into, Gradients, Tape, Var};
pub use tensor::Tensor;
