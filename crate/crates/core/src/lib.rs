pub mod cli;
pub mod config;
pub mod diff;
pub mod evalrank;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod pipeline;
pub mod ram;
pub mod relnet;
pub mod scene;
mod error;

pub use error::{Error, Result};
