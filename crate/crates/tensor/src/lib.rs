//! Dense `f64` tensors, a define-by-run autodiff tape, deterministic
//! initialization and the binary checkpoint format.

pub mod activation;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use activation::Activation;
pub use error::{Result, TensorError};
pub use init::{init_parameter, InitScheme};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
