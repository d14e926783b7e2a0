//! Top-k expert selection, outlier truncation against `mean + k * std`, and
//! fixed frequency voting with a probability tie-break.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::diversity::SimilarityRecord;
use crate::error::{Error, Result};
use crate::noise::noise_sigma;
use crate::scalar::Scalar;
use crate::types::{
    EmptyTruncationPolicy, ExpertPrediction, FusionConfig, StepRecord, TokenId, TruncationStats,
    VoteTally,
};

/// Predictions ordered by descending probability, ties by ascending expert id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSubset<S> {
    members: Vec<ExpertPrediction<S>>,
}

impl<S: Scalar> ExpertSubset<S> {
    /// Sorts `members` into subset order.
    pub fn from_unordered(mut members: Vec<ExpertPrediction<S>>) -> Self {
        members.sort_by(rank_order);
        Self { members }
    }

    pub fn members(&self) -> &[ExpertPrediction<S>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn expert_ids(&self) -> Vec<usize> {
        self.members.iter().map(|p| p.expert_id).collect()
    }

    pub fn probabilities(&self) -> Vec<S> {
        self.members.iter().map(|p| p.probability).collect()
    }
}

fn rank_order<S: Scalar>(a: &ExpertPrediction<S>, b: &ExpertPrediction<S>) -> Ordering {
    b.probability
        .partial_cmp(&a.probability)
        .unwrap_or(Ordering::Equal)
        .then(a.expert_id.cmp(&b.expert_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome<S> {
    pub winner: TokenId,
    pub tally: VoteTally<S>,
    /// True when more than one token shared the top frequency.
    pub tie_broken: bool,
}

pub fn select_top_k<S: Scalar>(
    predictions: &[ExpertPrediction<S>],
    top_k: usize,
) -> Result<ExpertSubset<S>> {
    if top_k == 0 || top_k > predictions.len() {
        return Err(Error::config(format!(
            "top_k must be in [1, {}], got {top_k}",
            predictions.len()
        )));
    }
    let mut subset = ExpertSubset::from_unordered(predictions.to_vec());
    subset.members.truncate(top_k);
    Ok(subset)
}

/// Population mean and standard deviation, summed left to right.
pub(crate) fn population_mean_std<S: Scalar>(values: &[S]) -> (S, S) {
    let n = S::of(values.len() as f64);
    let mean = values.iter().fold(S::zero(), |acc, &v| acc + v) / n;
    let var = values
        .iter()
        .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / n;
    (mean, var.sqrt())
}

/// Mean, population std and threshold over the subset's probabilities.
///
/// Values are summed in ascending expert-id order so the result does not
/// depend on how the subset happens to be ordered.
pub fn compute_truncation_stats<S: Scalar>(
    subset: &ExpertSubset<S>,
    threshold_multiplier: S,
) -> Result<TruncationStats<S>> {
    if subset.is_empty() {
        return Err(Error::Internal(
            "truncation stats of an empty subset".into(),
        ));
    }
    let mut by_id: Vec<&ExpertPrediction<S>> = subset.members.iter().collect();
    by_id.sort_by_key(|p| p.expert_id);
    let probs: Vec<S> = by_id.iter().map(|p| p.probability).collect();
    let (mean, std) = population_mean_std(&probs);
    // An infinite multiplier times a zero std would be NaN; any finite
    // multiplier gives exactly `mean` here anyway.
    let threshold = if std == S::zero() {
        mean
    } else {
        mean + threshold_multiplier * std
    };
    Ok(TruncationStats {
        mean,
        std,
        threshold,
    })
}

/// Drops every member with `probability > threshold`.
pub fn truncate_outliers<S: Scalar>(
    subset: &ExpertSubset<S>,
    stats: &TruncationStats<S>,
    policy: EmptyTruncationPolicy,
) -> ExpertSubset<S> {
    let kept: Vec<ExpertPrediction<S>> = subset
        .members
        .iter()
        .filter(|p| !(p.probability > stats.threshold))
        .cloned()
        .collect();
    if !kept.is_empty() {
        return ExpertSubset { members: kept };
    }
    match policy {
        EmptyTruncationPolicy::KeepAll => subset.clone(),
        EmptyTruncationPolicy::KeepMaxProbability => ExpertSubset {
            members: subset.members.iter().take(1).cloned().collect(),
        },
    }
}

/// Most frequent token wins; frequency ties go to the token with the largest
/// member probability, then to the lowest token id.
pub fn vote<S: Scalar>(filtered: &ExpertSubset<S>) -> Result<VoteOutcome<S>> {
    if filtered.is_empty() {
        return Err(Error::Internal("vote over an empty subset".into()));
    }
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    let mut max_probability: BTreeMap<TokenId, S> = BTreeMap::new();
    for p in &filtered.members {
        *counts.entry(p.token).or_default() += 1;
        max_probability
            .entry(p.token)
            .and_modify(|m| *m = m.max(p.probability))
            .or_insert(p.probability);
    }

    let top = counts.values().copied().max().unwrap_or(0);
    let tied: Vec<TokenId> = counts
        .iter()
        .filter(|&(_, &c)| c == top)
        .map(|(&t, _)| t)
        .collect();
    // `tied` is ascending by token id, so a strict `>` keeps the lowest id
    // among exact probability ties.
    let mut winner = tied[0];
    for &t in &tied[1..] {
        if max_probability[&t] > max_probability[&winner] {
            winner = t;
        }
    }
    Ok(VoteOutcome {
        winner,
        tally: VoteTally {
            counts,
            max_probability,
        },
        tie_broken: tied.len() > 1,
    })
}

/// Runs selection, truncation and voting for one step and records the
/// noise scale and expert similarity alongside the decision.
pub fn fuse_step<S: Scalar>(
    step: usize,
    predictions: &[ExpertPrediction<S>],
    config: &FusionConfig<S>,
) -> Result<StepRecord<S>> {
    config.validate()?;
    if predictions.len() != config.num_experts {
        return Err(Error::config(format!(
            "expected {} predictions, got {}",
            config.num_experts,
            predictions.len()
        )));
    }
    let mut ordered = predictions.to_vec();
    ordered.sort_by_key(|p| p.expert_id);
    let ids: BTreeSet<usize> = ordered.iter().map(|p| p.expert_id).collect();
    if ids.len() != ordered.len() {
        return Err(Error::config("duplicate expert ids in one step"));
    }
    let dim = ordered[0].embedding.dim();
    for p in &ordered {
        if !(p.probability >= S::zero() && p.probability <= S::one()) {
            return Err(Error::config(format!(
                "expert {}: probability {} outside [0, 1]",
                p.expert_id, p.probability
            )));
        }
        if p.embedding.dim() != dim {
            return Err(Error::config(format!(
                "expert {}: embedding dimension {} differs from {dim}",
                p.expert_id,
                p.embedding.dim()
            )));
        }
    }

    let selected = select_top_k(&ordered, config.top_k)?;
    let stats = compute_truncation_stats(&selected, config.threshold_multiplier)?;
    let filtered = truncate_outliers(&selected, &stats, config.empty_truncation_policy);
    let outcome = vote(&filtered)?;

    let p_max = ordered
        .iter()
        .map(|p| p.probability)
        .fold(S::neg_infinity(), S::max);
    let sigma = noise_sigma(config.base_noise_scale, p_max)?;

    let similarity = if ordered.len() >= 2 {
        let embeddings: Vec<_> = ordered.iter().map(|p| &p.embedding).collect();
        Some(SimilarityRecord::from_embeddings(step, &embeddings)?)
    } else {
        None
    };

    Ok(StepRecord {
        step,
        predictions: ordered,
        selected: selected.expert_ids(),
        filtered: filtered.expert_ids(),
        stats,
        winner: outcome.winner,
        tie_broken: outcome.tie_broken,
        noise_sigma: sigma,
        similarity,
    })
}
