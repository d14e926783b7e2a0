//! Gaussian perturbation of the winning token's embedding, scaled by how far
//! the most confident expert sits from a coin flip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::types::{EmbeddingVector, FusionConfig, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams<S> {
    pub base_noise_scale: S,
    pub p_max: S,
    /// Standard deviation of every component's perturbation.
    pub sigma: S,
    pub seed: u64,
    /// Stream index; one stream per generation step.
    pub step: u64,
}

impl<S: Scalar> NoiseParams<S> {
    pub fn new(base_noise_scale: S, p_max: S, seed: u64, step: u64) -> Result<Self> {
        Ok(Self {
            base_noise_scale,
            p_max,
            sigma: noise_sigma(base_noise_scale, p_max)?,
            seed,
            step,
        })
    }

    /// Generator positioned at the start of this step's stream. Component `i`
    /// consumes the `i`-th normal draw.
    pub fn stream(&self) -> ChaCha8Rng {
        stream_rng(self.seed, self.step)
    }
}

/// `base_noise_scale * (p_max - 0.5)^2`.
pub fn noise_sigma<S: Scalar>(base_noise_scale: S, p_max: S) -> Result<S> {
    if !(base_noise_scale >= S::zero()) || !base_noise_scale.is_finite() {
        return Err(Error::config(format!(
            "base_noise_scale must be finite and >= 0, got {base_noise_scale}"
        )));
    }
    if !(p_max >= S::zero() && p_max <= S::one()) {
        return Err(Error::config(format!(
            "p_max must lie in [0, 1], got {p_max}"
        )));
    }
    let d = p_max - S::of(0.5);
    Ok(base_noise_scale * (d * d))
}

/// `e + eps` with `eps_i ~ Normal(0, sigma^2)` drawn from `rng`. A zero sigma
/// returns the embedding untouched and consumes nothing.
pub fn inject_noise<S: Scalar, R: Rng + ?Sized>(
    embedding: &EmbeddingVector<S>,
    params: &NoiseParams<S>,
    rng: &mut R,
) -> EmbeddingVector<S> {
    if params.sigma == S::zero() {
        return embedding.clone();
    }
    let sigma = params.sigma.as_f64();
    let perturbed: Vec<S> = embedding
        .as_slice()
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + S::of(z * sigma)
        })
        .collect();
    EmbeddingVector::new(perturbed).expect("finite embedding plus finite noise")
}

/// Perturbs the winner's embedding for `record`, with `p_max` taken over all
/// experts of the step.
pub fn apply_noise_to_step<S: Scalar>(
    record: &StepRecord<S>,
    config: &FusionConfig<S>,
) -> Result<(EmbeddingVector<S>, NoiseParams<S>)> {
    let winner = record
        .predictions
        .iter()
        .find(|p| p.token == record.winner)
        .ok_or_else(|| Error::Internal(format!("winner {} has no prediction", record.winner)))?;
    let params = NoiseParams::new(
        config.base_noise_scale,
        record.max_probability(),
        config.noise_seed,
        record.step as u64,
    )?;
    let mut rng = params.stream();
    Ok((inject_noise(&winner.embedding, &params, &mut rng), params))
}
