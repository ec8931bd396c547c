pub mod analysis;
pub mod encoder;
pub mod error;
pub mod hypergraph;
pub mod objectives;
pub mod rng;
pub mod table_io;
pub mod tasks;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
