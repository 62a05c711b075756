pub mod attention;
pub mod backend;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
