pub mod attnmask;
pub mod checks;
pub mod data;
pub mod encoders;
mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
