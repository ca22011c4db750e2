pub mod analysis;
pub mod error;
pub mod image;
pub mod model;
pub mod personalize;
pub mod tensor;
pub mod tokenizer;
pub mod workbench;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
