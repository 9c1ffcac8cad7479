//! Graph-regularized sparse coding unrolled into a trainable feed-forward
//! clustering network, with the classical solvers used to initialize it,
//! clustering loss heads, an SGD trainer and clustering metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod sparse;
pub mod tagnet;
pub mod trainer;

pub use error::{CheckpointError, DataError, Error, Result};
pub use numeric::{Matrix, Rng, Vector};
