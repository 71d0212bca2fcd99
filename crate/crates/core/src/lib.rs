//! Training-free architecture search for hyperspectral token-classifier
//! transformers.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: 64-bit tensors and a reverse-mode tape.
//! * [`search_space`]: genotypes, the sampler, model-size and FLOPs counting.
//! * [`model`]: materializes a genotype as an encoder-only transformer with a
//!   layer registry.
//! * [`data`]: hyperspectral cube container, spectral tokenization and
//!   synthetic batches.
//! * [`proxies`]: zero-cost proxy scorers and population scoring.
//! * [`analysis`]: rank correlation, bucketed and factor analyses, toy
//!   training.
//! * [`predictor`]: random-forest proxy fusion.

pub mod analysis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod predictor;
pub mod proxies;
pub mod search_space;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
