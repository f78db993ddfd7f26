pub mod cli;
pub mod compose;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod model;
pub mod tokenizer;
pub mod train;
pub mod vocab_map;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor};
