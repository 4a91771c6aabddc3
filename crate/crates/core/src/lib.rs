pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod graphnet;
mod init;
pub mod model;
pub mod recurrent;
pub mod training;

pub use error::{Error, Result};
