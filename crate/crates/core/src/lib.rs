//! Decision transformers with decoupled return conditioning.

pub mod cli;
pub mod data;
pub mod envs;
mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
