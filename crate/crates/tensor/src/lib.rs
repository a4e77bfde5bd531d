//! Dense tensors, a define-by-run reverse-mode tape and Adam.

mod error;
pub mod fd;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::Adam;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
