pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod filtering;
pub mod gp;
pub mod simulators;
pub mod inference;
pub mod objective;
pub mod ssm;

pub use error::{Error, Result};
