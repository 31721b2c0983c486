//! Knowledge-injected medication recommendation.
//!
//! The crate builds knowledge-based code embeddings by aggregating a concept
//! graph through learned relation filters, injects them into EHR visit
//! representations, conditions on medication history, and trains the whole
//! model with a reverse-mode tape over `f64` tensors.

pub mod aggregate;
pub mod dataset;
pub mod decoder;
pub mod ehr;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
