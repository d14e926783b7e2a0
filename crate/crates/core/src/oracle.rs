//! Monte Carlo checks of the ensemble arguments behind the fusion pipeline:
//! variance of an averaged ensemble (independent and equicorrelated experts),
//! the effect of outlier truncation on a contaminated sample, and how often
//! perturbing probabilities flips a vote.
//!
//! Every trial draws from its own `(seed, trial)` stream, so results are
//! identical regardless of how rayon schedules the work.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    compute_truncation_stats, population_mean_std, truncate_outliers, vote, ExpertSubset,
};
use crate::noise::noise_sigma;
use crate::rng::stream_rng;
use crate::types::{EmbeddingVector, EmptyTruncationPolicy, ExpertPrediction, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Ensemble size.
    pub k: usize,
    /// Per-expert variance.
    pub sigma2: f64,
    pub mu: f64,
    /// Pairwise correlation between experts, in `[0, 1)`.
    pub rho: f64,
    pub trials: usize,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn iid(k: usize, sigma2: f64, trials: usize, seed: u64) -> Self {
        Self {
            k,
            sigma2,
            mu: 0.5,
            rho: 0.0,
            trials,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.trials < 2 {
            return Err(Error::config(
                "simulation needs k >= 1 and at least 2 trials",
            ));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::config("sigma2 must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub empirical: f64,
    pub theoretical: f64,
    pub relative_error: f64,
}

/// Unbiased sample variance, summed in index order.
fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn estimate(spec: &SimulationSpec, theoretical: f64, common_factor: bool) -> VarianceEstimate {
    let sigma = spec.sigma2.sqrt();
    let (shared, own) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let means: Vec<f64> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(spec.seed, t as u64);
            let z: f64 = if common_factor {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            let sum: f64 = (0..spec.k)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    spec.mu + sigma * (shared * z + own * w)
                })
                .sum();
            sum / spec.k as f64
        })
        .collect();
    let empirical = sample_variance(&means);
    let relative_error = if theoretical == 0.0 {
        empirical.abs()
    } else {
        (empirical - theoretical).abs() / theoretical
    };
    VarianceEstimate {
        empirical,
        theoretical,
        relative_error,
    }
}

/// Variance of the mean of `k` independent experts against `sigma2 / k`.
pub fn variance_of_mean_iid(spec: &SimulationSpec) -> Result<VarianceEstimate> {
    spec.validate()?;
    if spec.rho != 0.0 {
        return Err(Error::config("variance_of_mean_iid requires rho = 0"));
    }
    Ok(estimate(spec, spec.sigma2 / spec.k as f64, false))
}

/// Variance of the mean of `k` experts with pairwise correlation `rho`,
/// built as `sqrt(rho) z + sqrt(1 - rho) w_i`, against
/// `sigma2 (1 + (k - 1) rho) / k`.
pub fn variance_of_mean_correlated(spec: &SimulationSpec) -> Result<VarianceEstimate> {
    spec.validate()?;
    Ok(estimate(
        spec,
        correlated_variance(spec.k, spec.sigma2, spec.rho),
        true,
    ))
}

pub fn correlated_variance(k: usize, sigma2: f64, rho: f64) -> f64 {
    sigma2 * (1.0 + (k as f64 - 1.0) * rho) / k as f64
}

/// A sample of expert probabilities: a clean Gaussian component plus a spike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub samples_per_trial: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub spike_value: f64,
    /// Probability that any one sample is the spike.
    pub spike_weight: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    /// 90% mass around 0.2, 10% spike at 0.95, 20 experts per sample.
    fn default() -> Self {
        Self {
            samples_per_trial: 20,
            clean_mean: 0.2,
            clean_std: 0.02,
            spike_value: 0.95,
            spike_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationEffect {
    pub trials: usize,
    /// Fraction of trials in which truncation removed at least one sample.
    pub removal_fraction: f64,
    /// Fraction of trials with post-truncation variance strictly below pre.
    pub variance_reduced_fraction: f64,
    /// Mean of post/pre variance (1 for zero-variance samples).
    pub mean_variance_ratio: f64,
    /// Mean |sample mean - clean mean| before truncation.
    pub mad_before: f64,
    pub mad_after: f64,
}

fn unit_embedding() -> EmbeddingVector<f64> {
    EmbeddingVector::new(vec![1.0]).expect("constant embedding")
}

/// Runs the production truncation step on `trials` mixture samples.
pub fn truncation_effect(
    mixture: &MixtureSpec,
    threshold_multiplier: f64,
    trials: usize,
) -> Result<TruncationEffect> {
    if trials == 0 || mixture.samples_per_trial == 0 {
        return Err(Error::config("truncation_effect needs trials and samples"));
    }
    struct Trial {
        removed: bool,
        reduced: bool,
        ratio: f64,
        dev_before: f64,
        dev_after: f64,
    }
    let emb = unit_embedding();
    let per_trial: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let mut rng = stream_rng(mixture.seed, t as u64);
            let preds = (0..mixture.samples_per_trial)
                .map(|i| {
                    let p = if rng.random_bool(mixture.spike_weight) {
                        mixture.spike_value
                    } else {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mixture.clean_mean + mixture.clean_std * z
                    };
                    ExpertPrediction::new(i, TokenId(0), p.clamp(0.0, 1.0), emb.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let subset = ExpertSubset::from_unordered(preds);
            let stats = compute_truncation_stats(&subset, threshold_multiplier)?;
            let kept = truncate_outliers(&subset, &stats, EmptyTruncationPolicy::KeepAll);
            let (before_mean, before_std) = population_mean_std(&subset.probabilities());
            let (after_mean, after_std) = population_mean_std(&kept.probabilities());
            let (vb, va) = (before_std * before_std, after_std * after_std);
            let ratio = if vb == 0.0 { 1.0 } else { va / vb };
            Ok(Trial {
                removed: kept.len() < subset.len(),
                reduced: va < vb,
                ratio,
                dev_before: (before_mean - mixture.clean_mean).abs(),
                dev_after: (after_mean - mixture.clean_mean).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = trials as f64;
    let mean = |f: fn(&Trial) -> f64| per_trial.iter().map(f).sum::<f64>() / n;
    Ok(TruncationEffect {
        trials,
        removal_fraction: mean(|r| f64::from(u8::from(r.removed))),
        variance_reduced_fraction: mean(|r| f64::from(u8::from(r.reduced))),
        mean_variance_ratio: mean(|r| r.ratio),
        mad_before: mean(|r| r.dev_before),
        mad_after: mean(|r| r.dev_after),
    })
}

/// Synthetic four-expert ensembles for the perturbation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Two experts on token 0 and one on token 1, all moderately confident,
    /// plus one expert backing token 1 at 0.95.
    OverconfidentDissenter,
    /// Every expert backs token 0.
    Unanimous,
    /// Two experts per token, probabilities uniform in `[0.3, 0.9]`.
    Contested,
}

impl Scenario {
    fn draw<R: Rng>(self, rng: &mut R) -> Vec<(u32, f64)> {
        match self {
            Scenario::OverconfidentDissenter => vec![
                (0, rng.random_range(0.5..0.7)),
                (0, rng.random_range(0.5..0.7)),
                (1, rng.random_range(0.5..0.7)),
                (1, 0.95),
            ],
            Scenario::Unanimous => (0..4).map(|_| (0, rng.random_range(0.3..0.9))).collect(),
            Scenario::Contested => [0, 0, 1, 1]
                .into_iter()
                .map(|t| (t, rng.random_range(0.3..0.9)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub scenario: Scenario,
    pub trials: usize,
    pub base_noise_scale: f64,
    /// Fraction of trials whose vote changed once every probability became
    /// `p + eps`, `eps ~ Normal(0, sigma(p_max)^2)`, clamped to `[0, 1]`.
    pub flip_fraction: f64,
}

pub fn perturbation_dominance(
    scenario: Scenario,
    trials: usize,
    base_noise_scale: f64,
    seed: u64,
) -> Result<DominanceReport> {
    if trials == 0 {
        return Err(Error::config(
            "perturbation_dominance needs at least one trial",
        ));
    }
    let emb = unit_embedding();
    let subset = |items: &[(u32, f64)]| -> Result<ExpertSubset<f64>> {
        Ok(ExpertSubset::from_unordered(
            items
                .iter()
                .enumerate()
                .map(|(i, &(t, p))| ExpertPrediction::new(i, TokenId(t), p, emb.clone()))
                .collect::<Result<Vec<_>>>()?,
        ))
    };
    let flips = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let mut rng = stream_rng(seed, t as u64);
            let items = scenario.draw(&mut rng);
            let p_max = items.iter().map(|x| x.1).fold(0.0, f64::max);
            let sigma = noise_sigma(base_noise_scale, p_max)?;
            let noisy: Vec<(u32, f64)> = items
                .iter()
                .map(|&(tok, p)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (tok, (p + sigma * z).clamp(0.0, 1.0))
                })
                .collect();
            Ok(vote(&subset(&items)?)?.winner != vote(&subset(&noisy)?)?.winner)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DominanceReport {
        scenario,
        trials,
        base_noise_scale,
        flip_fraction: flips.iter().filter(|&&f| f).count() as f64 / trials as f64,
    })
}

/// One line of the `oracle` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub claim: String,
    /// Closed-form or required value; absent when nothing is asserted.
    pub theoretical: Option<f64>,
    pub empirical: f64,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative tolerance for variance-of-mean checks at 10^5 trials.
pub const VARIANCE_TOLERANCE: f64 = 0.05;

/// The standard oracle suite at desk scale.
pub fn run_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let trials = 100_000;
    let mut out = Vec::new();
    for sigma2 in [0.04, 1.0] {
        for k in [1, 4, 16] {
            let est = variance_of_mean_iid(&SimulationSpec::iid(k, sigma2, trials, seed))?;
            out.push(OracleReport {
                claim: format!("var(mean of {k} iid experts) = sigma2/k, sigma2={sigma2}"),
                theoretical: Some(est.theoretical),
                empirical: est.empirical,
                trials,
                seed,
                tolerance: VARIANCE_TOLERANCE,
                pass: est.relative_error <= VARIANCE_TOLERANCE,
            });
        }
    }
    for rho in [0.5, 0.99] {
        let spec = SimulationSpec {
            rho,
            ..SimulationSpec::iid(4, 1.0, trials, seed)
        };
        let est = variance_of_mean_correlated(&spec)?;
        out.push(OracleReport {
            claim: format!("var(mean of 4 experts, rho={rho}) = sigma2(1+(k-1)rho)/k"),
            theoretical: Some(est.theoretical),
            empirical: est.empirical,
            trials,
            seed,
            tolerance: VARIANCE_TOLERANCE,
            pass: est.relative_error <= VARIANCE_TOLERANCE,
        });
    }
    let mixture = MixtureSpec {
        seed,
        ..MixtureSpec::default()
    };
    let eff = truncation_effect(&mixture, 1.0, 10_000)?;
    out.push(OracleReport {
        claim: "truncation lowers variance on a 10% spike mixture (fraction of trials)".into(),
        theoretical: Some(0.99),
        empirical: eff.variance_reduced_fraction,
        trials: eff.trials,
        seed,
        tolerance: 0.0,
        pass: eff.variance_reduced_fraction >= 0.99,
    });
    out.push(OracleReport {
        claim: "truncation moves the mean toward the clean component (MAD after)".into(),
        theoretical: Some(eff.mad_before),
        empirical: eff.mad_after,
        trials: eff.trials,
        seed,
        tolerance: 0.0,
        pass: eff.mad_after < eff.mad_before,
    });
    for scenario in [Scenario::Contested, Scenario::OverconfidentDissenter] {
        let r = perturbation_dominance(scenario, 10_000, 1.0, seed)?;
        out.push(OracleReport {
            claim: format!("p+eps vote flip fraction, {scenario:?}, base_noise_scale=1"),
            theoretical: None,
            empirical: r.flip_fraction,
            trials: r.trials,
            seed,
            tolerance: 0.0,
            pass: true,
        });
    }
    Ok(out)
}
