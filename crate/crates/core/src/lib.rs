pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grad;
pub mod linalg;
pub mod metric;
pub mod model;
pub mod pooling;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector, DEFAULT_EPS};
