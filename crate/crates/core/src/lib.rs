pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod posterior;
pub mod priors;
pub mod sampler;
pub mod simgen;

pub use error::{Error, Result};
