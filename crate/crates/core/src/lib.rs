pub mod engine;
pub mod error;
pub mod fgmask;
pub mod frameio;
pub mod io;
pub mod losses;
pub mod synth;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
