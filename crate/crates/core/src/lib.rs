pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod extractor;
pub mod field;
pub mod geometry;
pub mod hashenc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod projector;
pub mod refiner;
pub mod volume;

pub use error::{Error, Result};
