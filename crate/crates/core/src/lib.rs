//! Desk-scale one-stage scene graph generation.
//!
//! A transformer encoder turns an image into feature tokens; a decoder fed
//! with separate subject, object and predicate queries predicts a fixed-size
//! set of relation triplets. Training uses Hungarian matching with costs
//! summed across decoder layers and K independent query groups.

pub mod config;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
