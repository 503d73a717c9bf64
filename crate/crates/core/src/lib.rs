//! Simulation engine for distributed mode consensus over undirected,
//! piecewise-constant networks.

pub mod algorithms;
pub mod bounds;
pub mod error;
pub mod integrate;
pub mod network;
pub mod protocol;
pub mod scenario;

pub use error::{Error, Result};
