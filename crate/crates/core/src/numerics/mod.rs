//! Dense tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use nn::{Activation, Linear, Mlp, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
