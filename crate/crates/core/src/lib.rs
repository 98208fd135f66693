pub mod error;
pub mod extraction;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
