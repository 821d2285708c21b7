pub mod degradation;
pub mod dynfilters;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
