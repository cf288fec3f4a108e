pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod head;
pub mod io;
pub mod model;
pub mod params;
pub mod syngen;
pub mod tensor;
pub mod towers;
pub mod train;

pub use error::{Error, Result};
