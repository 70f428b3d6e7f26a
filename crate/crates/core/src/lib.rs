pub mod agent;
pub mod diffnet;
pub mod dist;
pub mod envs;
pub mod error;
pub mod harness;
pub mod replay;

pub use error::{Error, Result};
