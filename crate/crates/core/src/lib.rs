pub mod config;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod flow;
pub mod forcing;
pub mod grid;
pub mod linalg;
pub mod mixture;
pub mod sampling;
pub mod species;

pub use error::{Error, Result};
