//! Domain types shared by every stage of the fusion pipeline, plus the
//! line-delimited JSON trace format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::diversity::{SimilarityMatrix, SimilarityRecord};
use crate::error::{Error, Result};
use crate::scalar::{nonfinite, Scalar};

/// Opaque index into the backend's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite, non-empty embedding of a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "S: Scalar")]
pub struct EmbeddingVector<S>(Vec<S>);

impl<S: Scalar> EmbeddingVector<S> {
    pub fn new(components: Vec<S>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::config(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> S {
        self.0
            .iter()
            .zip(&other.0)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm_squared(&self) -> S {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

/// One virtual expert's proposal for the next token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ExpertPrediction<S> {
    pub expert_id: usize,
    pub token: TokenId,
    /// Probability the expert assigns to its own argmax token.
    pub probability: S,
    /// Embedding of `token`.
    pub embedding: EmbeddingVector<S>,
}

impl<S: Scalar> ExpertPrediction<S> {
    pub fn new(
        expert_id: usize,
        token: TokenId,
        probability: S,
        embedding: EmbeddingVector<S>,
    ) -> Result<Self> {
        if !(probability >= S::zero() && probability <= S::one()) {
            return Err(Error::config(format!(
                "expert {expert_id}: probability {probability} outside [0, 1]"
            )));
        }
        Ok(Self {
            expert_id,
            token,
            probability,
            embedding,
        })
    }
}

/// What to do when every member of the top-k subset lies above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyTruncationPolicy {
    #[default]
    KeepAll,
    KeepMaxProbability,
}

/// Last-resort ordering when both frequency and probability are tied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalTieBreak {
    #[default]
    LowestTokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FusionConfig<S> {
    pub num_experts: usize,
    pub top_k: usize,
    /// Multiplier on the standard deviation in `mean + multiplier * std`.
    /// `inf` disables truncation.
    #[serde(with = "nonfinite")]
    pub threshold_multiplier: S,
    pub base_noise_scale: S,
    pub noise_seed: u64,
    #[serde(default)]
    pub empty_truncation_policy: EmptyTruncationPolicy,
    #[serde(default)]
    pub tie_break_final: FinalTieBreak,
}

impl<S: Scalar> FusionConfig<S> {
    /// All experts voting, one-sigma truncation, noise scale 0.1.
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            top_k: num_experts,
            threshold_multiplier: S::one(),
            base_noise_scale: S::of(0.1),
            noise_seed: 0,
            empty_truncation_policy: EmptyTruncationPolicy::KeepAll,
            tie_break_final: FinalTieBreak::LowestTokenId,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("num_experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top_k must be in [1, {}], got {}",
                self.num_experts, self.top_k
            )));
        }
        if !(self.threshold_multiplier >= S::zero()) {
            return Err(Error::config("threshold_multiplier must be >= 0"));
        }
        if !(self.base_noise_scale >= S::zero()) || !self.base_noise_scale.is_finite() {
            return Err(Error::config("base_noise_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Truncation is disabled by an infinite multiplier.
    pub fn truncation_enabled(&self) -> bool {
        self.threshold_multiplier.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TruncationStats<S> {
    pub mean: S,
    /// Population standard deviation.
    pub std: S,
    #[serde(with = "nonfinite")]
    pub threshold: S,
}

/// Frequency table for one vote, with the largest member probability per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct VoteTally<S> {
    pub counts: BTreeMap<TokenId, usize>,
    pub max_probability: BTreeMap<TokenId, S>,
}

impl<S: Scalar> VoteTally<S> {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Everything that happened in one generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<S> {
    pub step: usize,
    /// All N predictions, ordered by expert id.
    pub predictions: Vec<ExpertPrediction<S>>,
    /// Expert ids of the top-k subset, in selection order.
    pub selected: Vec<usize>,
    /// Expert ids surviving truncation, in selection order.
    pub filtered: Vec<usize>,
    pub stats: TruncationStats<S>,
    pub winner: TokenId,
    pub tie_broken: bool,
    pub noise_sigma: S,
    /// Absent when fewer than two experts participate.
    pub similarity: Option<SimilarityRecord<S>>,
}

impl<S: Scalar> StepRecord<S> {
    pub fn orthogonality(&self) -> Option<S> {
        self.similarity.as_ref().map(|s| s.orthogonality)
    }

    pub fn prediction(&self, expert_id: usize) -> Option<&ExpertPrediction<S>> {
        self.predictions.iter().find(|p| p.expert_id == expert_id)
    }

    /// Probability of every surviving expert, in selection order.
    pub fn filtered_probabilities(&self) -> Vec<S> {
        self.filtered
            .iter()
            .filter_map(|&id| self.prediction(id).map(|p| p.probability))
            .collect()
    }

    pub fn max_probability(&self) -> S {
        self.predictions
            .iter()
            .map(|p| p.probability)
            .fold(S::neg_infinity(), S::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace<S> {
    pub config: FusionConfig<S>,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord<S>>,
    /// False when a backend failure aborted the run.
    pub complete: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct TraceHeader<S> {
    config: FusionConfig<S>,
    prompt: String,
    tokens: Vec<TokenId>,
    num_steps: usize,
    complete: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct StepLine<S> {
    step: usize,
    predictions: Vec<ExpertPrediction<S>>,
    selected: Vec<usize>,
    filtered: Vec<usize>,
    mean: S,
    std: S,
    #[serde(with = "nonfinite")]
    threshold: S,
    winner: TokenId,
    tie_broken: bool,
    noise_sigma: S,
    orthogonality: Option<S>,
    mean_upper: Option<S>,
    matrix: Option<SimilarityMatrix<S>>,
}

impl<S: Scalar> From<&StepRecord<S>> for StepLine<S> {
    fn from(r: &StepRecord<S>) -> Self {
        Self {
            step: r.step,
            predictions: r.predictions.clone(),
            selected: r.selected.clone(),
            filtered: r.filtered.clone(),
            mean: r.stats.mean,
            std: r.stats.std,
            threshold: r.stats.threshold,
            winner: r.winner,
            tie_broken: r.tie_broken,
            noise_sigma: r.noise_sigma,
            orthogonality: r.similarity.as_ref().map(|s| s.orthogonality),
            mean_upper: r.similarity.as_ref().map(|s| s.mean_upper),
            matrix: r.similarity.as_ref().map(|s| s.matrix.clone()),
        }
    }
}

impl<S: Scalar> StepLine<S> {
    fn into_record(self) -> Result<StepRecord<S>> {
        let similarity = match (self.matrix, self.mean_upper, self.orthogonality) {
            (Some(matrix), Some(mean_upper), Some(orthogonality)) => Some(SimilarityRecord {
                step: self.step,
                matrix,
                mean_upper,
                orthogonality,
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Protocol(format!(
                    "step {}: similarity fields must be all present or all absent",
                    self.step
                )))
            }
        };
        Ok(StepRecord {
            step: self.step,
            predictions: self.predictions,
            selected: self.selected,
            filtered: self.filtered,
            stats: TruncationStats {
                mean: self.mean,
                std: self.std,
                threshold: self.threshold,
            },
            winner: self.winner,
            tie_broken: self.tie_broken,
            noise_sigma: self.noise_sigma,
            similarity,
        })
    }
}

impl<S: Scalar> GenerationTrace<S> {
    pub fn new(config: FusionConfig<S>, prompt: impl Into<String>) -> Self {
        Self {
            config,
            prompt: prompt.into(),
            tokens: Vec::new(),
            steps: Vec::new(),
            complete: true,
        }
    }

    pub fn push(&mut self, record: StepRecord<S>) {
        self.tokens.push(record.winner);
        self.steps.push(record);
    }

    /// Header line with the config, then one line per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = TraceHeader {
            config: self.config.clone(),
            prompt: self.prompt.clone(),
            tokens: self.tokens.clone(),
            num_steps: self.steps.len(),
            complete: self.complete,
        };
        let io = |e| Error::io("<trace>", e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for step in &self.steps {
            serde_json::to_writer(&mut w, &StepLine::from(step))?;
            w.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Protocol("empty trace file".into()))?
            .map_err(|e| Error::io("<trace>", e))?;
        let header: TraceHeader<S> = serde_json::from_str(&header_line)?;
        let mut steps = Vec::with_capacity(header.num_steps);
        for line in lines {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepLine<S> = serde_json::from_str(&line)?;
            steps.push(step.into_record()?);
        }
        if steps.len() != header.num_steps || header.tokens.len() != steps.len() {
            return Err(Error::Protocol(format!(
                "trace header announces {} steps and {} tokens, found {} step lines",
                header.num_steps,
                header.tokens.len(),
                steps.len()
            )));
        }
        Ok(Self {
            config: header.config,
            prompt: header.prompt,
            tokens: header.tokens,
            steps,
            complete: header.complete,
        })
    }
}
