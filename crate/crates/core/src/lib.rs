pub mod attention;
pub mod backend;
pub mod editing;
pub mod error;
pub mod eval;
pub mod io;
pub mod probing;
pub mod service;

pub use error::{Error, Result};
