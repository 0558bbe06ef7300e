pub mod audio;
pub mod cca;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod net;
pub mod objectives;
pub mod tags;
pub mod tensor;
pub mod train;

pub use error::{CoalaError, Result};
