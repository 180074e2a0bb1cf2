pub mod error;
pub mod gradcore;

pub use error::{Error, Result};
pub mod extractor;
pub mod nn;
pub mod tuples;
pub mod losses;
pub mod model;
pub mod optim;
pub mod adversary;
pub mod metrics;
pub mod harness;
pub mod selftest;
