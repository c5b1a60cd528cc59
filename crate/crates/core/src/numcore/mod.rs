//! Dense `f64` tensors with a dynamic reverse-mode tape.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{init, Grads, ParamId, ParamStore, Session};
pub use tape::{gelu_scalar, Tape, Var};
pub use tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
