//! S2PNM: a sequential recommender that fuses static user preferences
//! (biased matrix factorization) with dynamic preferences decoded from a
//! learned dictionary, weighted by a GRU-with-attention posterior estimator.
//!
//! The crate covers the full pipeline: corpus ingestion and split protocols,
//! the numeric kernels and optimizer, the baseline factorization model, the
//! sequence-to-preference network, training with session-parallel
//! mini-batches, evaluation for rating and top-k ranking tasks, and synthetic
//! corpus generators with known ground truth.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod biasedmf;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod estimator;
pub mod evaluator;
pub mod kernel;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod seq2pref;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
