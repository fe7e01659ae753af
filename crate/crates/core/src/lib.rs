//! Hierarchical iterative CRF for few-shot hierarchical text classification.
//!
//! The label hierarchy is flattened into a repeated level schedule (the
//! reasoning chain); every slot of the chain gets label logits from an
//! emitter, and a linear-chain CRF whose transitions encode the hierarchy
//! routes those logits into a consistent root-to-leaf prediction.

pub mod chain;
pub mod data;
pub mod emission;
pub mod error;
pub mod fewshot;
pub mod icrf;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod taxonomy;

pub use error::{Error, Result};
