pub mod cohort;
pub mod config;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod hypergraph;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod train;

pub use error::{HydaError, Result};
