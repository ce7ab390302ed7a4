pub mod diffusion;
pub mod env;
pub mod error;
pub mod harness;
pub mod idm;
pub mod nn;
pub mod planner;
pub mod prompt;
pub mod sail;
pub mod seed;

pub use error::{Error, Result};
