//! Self-supervised representation learning by bootstrapping a moving-average
//! target network.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
