//! Dense `f64` tensors with a recording tape for reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major contiguous storage, a handful of
//! operations (matrix products, broadcast arithmetic, masked softmax, layer
//! normalization, GELU, row gather/concat, permutes) and a tape that records
//! every operation so [`Tape::backward`] can replay them in reverse.
//!
//! Learnable weights live in a [`ParamStore`] outside the tape. A forward pass
//! binds parameters onto a fresh tape with [`Tape::param`]; after
//! [`Tape::backward`] the resulting [`Gradients`] are folded back into the store.

mod error;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use error::TensorError;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
