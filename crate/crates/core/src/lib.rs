pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod preference;
pub mod quant;
pub mod serve;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
