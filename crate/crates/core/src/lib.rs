pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod matrix;
pub mod mcem;
pub mod nmf;
pub mod pipeline;
pub mod streams;
pub mod synthdata;
pub mod vae;

pub use error::{Error, Result};
