pub mod aggregation;
pub mod construction;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod modality;
pub mod model;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use model::{GraphCage, ModelConfig, Strategy};
pub use tensor::{Tape, Tensor, Var};
