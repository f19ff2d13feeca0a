//! Dense row-major tensors, the kernels needed by windowed attention models,
//! a reverse-mode tape and a finite-difference gradient oracle.

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, CheckReport, FiniteDiff};
pub use optim::AdamW;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, OP_NAMES};
pub use tensor::{strides_of, Tensor};
