pub mod cloud;
pub mod encoder;
mod error;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod rigid;
pub mod training;
pub mod tree;

pub use error::{CoreError, Result};
