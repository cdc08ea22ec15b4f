pub mod cli;
pub mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod nets;
pub mod real;
pub mod rng;
pub mod snapshot;
pub mod streams;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::{Tape, Tensor, Var};
