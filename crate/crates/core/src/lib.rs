pub mod backbone;
pub mod config;
pub mod densecrf;
pub mod error;
pub mod evalkit;
pub mod hideseek;
pub mod losses;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
