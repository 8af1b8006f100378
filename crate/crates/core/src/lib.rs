//! Temporal-shift video action recognition for the six EAR activity
//! categories: frame-store ingestion, segment sampling, a CPU ResNeXt/TSM
//! network with hand-written gradients, the training recipe, and challenge
//! scoring.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod net;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scorer;
pub mod shift;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
