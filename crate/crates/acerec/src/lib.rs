//! Generative sequential recommendation with semantic item IDs.
//!
//! The pipeline: item embeddings are quantized into short semantic-ID codes
//! (optimized product quantization), an attentive token merger compresses
//! each item's code-token embeddings into a few latent tokens plus an intent
//! token, a causal transformer models the resulting sequence, and candidates
//! are scored holistically from per-subspace log-probability tables.
//!
//! Numeric kernels are generic over [`scalar::Scalar`]; training runs in
//! `f32` and the finite-difference gradient harness in `f64`.

pub mod config;
pub mod data;
pub mod evaluation;
pub mod graph;
pub mod inference;
pub mod model;
pub mod objectives;
pub mod opq;
pub mod scalar;
pub mod trainer;

/// Default training precision.
pub type TrainScalar = f32;

/// Precision used by the finite-difference gradient harness.
pub type CheckScalar = f64;
