//! Decoding-time fusion of prompted "virtual experts" sharing one model.
//!
//! Each step, every expert proposes its argmax token with a probability. The
//! fusion pipeline keeps the `top_k` most confident experts, drops those above
//! `mean + k * std`, and picks the most frequent remaining token (ties go to the
//! higher probability). The winner's embedding is perturbed with Gaussian noise
//! scaled by `base_noise_scale * (p_max - 0.5)^2` before it re-enters the
//! context.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the scalar for the common case.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod diversity;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod noise;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::{
    EmbeddingVector, EmptyTruncationPolicy, ExpertPrediction, FinalTieBreak, FusionConfig,
    GenerationTrace, StepRecord, TokenId, TruncationStats, VoteTally,
};

pub type Prediction = types::ExpertPrediction<f64>;
pub type Prediction32 = types::ExpertPrediction<f32>;
pub type Embedding = types::EmbeddingVector<f64>;
pub type Embedding32 = types::EmbeddingVector<f32>;
pub type Config = types::FusionConfig<f64>;
pub type Config32 = types::FusionConfig<f32>;
pub type Stats = types::TruncationStats<f64>;
pub type Step = types::StepRecord<f64>;
pub type Step32 = types::StepRecord<f32>;
pub type Trace = types::GenerationTrace<f64>;
pub type Trace32 = types::GenerationTrace<f32>;
pub type Subset = fusion::ExpertSubset<f64>;
pub type Similarity = diversity::SimilarityRecord<f64>;
