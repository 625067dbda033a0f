pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod identity;
pub mod judge;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
