pub mod cli;
pub mod config;
pub mod driver;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod levelset;
pub mod sensitivity;
pub mod tbt;
pub mod transport;

pub use error::{Error, Result};
