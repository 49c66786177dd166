pub mod bench;
pub mod checks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod hpc;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod streaming;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
