use std::collections::{BTreeMap, HashSet};
use std::fmt::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{load_cases, run_eval};
use super::generate::{generate, write_trace};
use super::{fmt_f64, AblationVariant, ExperimentSpec};
use crate::backend::build_backend;
use crate::diversity::write_file;
use crate::error::Result;
use crate::fusion::population_mean_std;
use crate::rng::WordHasher;
use crate::types::{GenerationTrace, StepRecord, TokenId};

/// Aggregates of one variant over every repetition and task. Latency is
/// deliberately absent so that the bundle is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: AblationVariant,
    pub num_experts: usize,
    pub runs: usize,
    /// Mean over runs of distinct tokens / generated tokens.
    pub distinct_token_ratio: f64,
    /// Mean over runs of the share of bigrams already seen earlier in the run.
    pub repeated_bigram_rate: f64,
    /// Mean over steps of the population variance of the surviving
    /// probabilities.
    pub fused_probability_variance: f64,
    /// Share of steps whose winner is among the most frequent tokens of all N
    /// predictions.
    pub majority_agreement: f64,
    /// Mean experts removed by truncation per step; absent when truncation
    /// is disabled.
    pub mean_removed: Option<f64>,
    /// `1 - hallucination rate` when evaluation cases are configured.
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub variants: Vec<VariantMetrics>,
    /// Traces of the first repetition, keyed by `{variant}_task{t}`.
    #[serde(skip)]
    pub sample_traces: BTreeMap<String, GenerationTrace<f64>>,
}

pub(crate) fn distinct_ratio(tokens: &[TokenId]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().collect::<HashSet<_>>().len() as f64 / tokens.len() as f64
}

pub(crate) fn repeated_bigram_rate(tokens: &[TokenId]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let repeats = tokens
        .windows(2)
        .filter(|w| !seen.insert((w[0], w[1])))
        .count();
    repeats as f64 / (tokens.len() - 1) as f64
}

pub(crate) fn agrees_with_majority(step: &StepRecord<f64>) -> bool {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for p in &step.predictions {
        *counts.entry(p.token).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    counts.get(&step.winner) == Some(&top)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn metrics(
    variant: AblationVariant,
    num_experts: usize,
    truncation: bool,
    traces: &[&GenerationTrace<f64>],
) -> VariantMetrics {
    let steps = || traces.iter().flat_map(|t| t.steps.iter());
    VariantMetrics {
        variant,
        num_experts,
        runs: traces.len(),
        distinct_token_ratio: mean(traces.iter().map(|t| distinct_ratio(&t.tokens))),
        repeated_bigram_rate: mean(traces.iter().map(|t| repeated_bigram_rate(&t.tokens))),
        fused_probability_variance: mean(steps().map(|s| {
            let (_, std) = population_mean_std(&s.filtered_probabilities());
            std * std
        })),
        majority_agreement: mean(steps().map(|s| f64::from(u8::from(agrees_with_majority(s))))),
        mean_removed: truncation
            .then(|| mean(steps().map(|s| (s.selected.len() - s.filtered.len()) as f64))),
        eval_accuracy: None,
    }
}

/// Runs the four variants `ablation_runs` times over every task. The fused
/// variants use `expert_counts[0]` experts; repetition `r` reseeds the mock
/// backend and the noise streams, identically for every variant.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationReport> {
    spec.validate()?;
    let fused_n = spec.expert_counts[0];
    let runs = spec.ablation_runs.max(1);
    let jobs: Vec<(AblationVariant, usize, usize)> = AblationVariant::ALL
        .into_iter()
        .flat_map(|v| (0..runs).flat_map(move |r| (0..spec.tasks.len()).map(move |t| (v, r, t))))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(variant, r, t)| -> Result<GenerationTrace<f64>> {
            let n = variant.num_experts(fused_n);
            let mut backend_cfg = spec.backend.clone();
            backend_cfg.mock_seed = WordHasher::new(spec.seed).word(r as u64).finish();
            let backend = build_backend(&backend_cfg)?;
            let config = variant
                .settings(&spec.fusion)
                .config(n, spec.noise_seed(t, n, r as u64))?;
            generate(
                &spec.tasks[t],
                &spec.pool(n)?,
                backend.as_ref(),
                &config,
                spec.steps,
            )?
            .into_result()
        })
        .collect::<Result<Vec<_>>>()?;

    let cases = spec.eval_cases.as_deref().map(load_cases).transpose()?;
    let mut variants = Vec::new();
    let mut sample_traces = BTreeMap::new();
    for variant in AblationVariant::ALL {
        let mine: Vec<(usize, usize, &GenerationTrace<f64>)> = jobs
            .iter()
            .zip(&traces)
            .filter(|((v, _, _), _)| *v == variant)
            .map(|((_, r, t), trace)| (*r, *t, trace))
            .collect();
        for &(_, t, trace) in mine.iter().filter(|(r, _, _)| *r == 0) {
            sample_traces.insert(format!("{variant}_task{t}"), trace.clone());
        }
        let truncation = variant
            .settings(&spec.fusion)
            .threshold_multiplier
            .is_finite();
        let all: Vec<&GenerationTrace<f64>> = mine.iter().map(|x| x.2).collect();
        let mut m = metrics(variant, variant.num_experts(fused_n), truncation, &all);
        if let Some(cases) = &cases {
            m.eval_accuracy = Some(1.0 - run_eval(spec, cases, variant)?.hallucination_rate);
        }
        variants.push(m);
    }
    Ok(AblationReport {
        seed: spec.seed,
        variants,
        sample_traces,
    })
}

impl AblationReport {
    pub fn get(&self, variant: AblationVariant) -> Option<&VariantMetrics> {
        self.variants.iter().find(|m| m.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,experts,runs,distinct_token_ratio,repeated_bigram_rate,fused_probability_variance,majority_agreement,mean_removed,eval_accuracy\n",
        );
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        for m in &self.variants {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                m.variant,
                m.num_experts,
                m.runs,
                fmt_f64(m.distinct_token_ratio),
                fmt_f64(m.repeated_bigram_rate),
                fmt_f64(m.fused_probability_variance),
                fmt_f64(m.majority_agreement),
                opt(m.mean_removed),
                opt(m.eval_accuracy),
            );
        }
        out
    }

    /// Writes `ablation.csv`, `ablation.json` and the first repetition's
    /// traces under `dir/traces/`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        let csv = dir.join("ablation.csv");
        write_file(&csv, self.to_csv().as_bytes())?;
        files.push(csv);
        let json = dir.join("ablation.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&json, text.as_bytes())?;
        files.push(json);
        for (key, trace) in &self.sample_traces {
            let path = dir.join("traces").join(format!("{key}.jsonl"));
            write_trace(&path, trace)?;
            files.push(path);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&t| TokenId(t)).collect()
    }

    #[test]
    fn sequence_metrics() {
        assert_eq!(distinct_ratio(&toks(&[1, 2, 1, 2])), 0.5);
        assert_eq!(distinct_ratio(&[]), 0.0);
        // bigrams (1,2) (2,1) (1,2) (2,3): one repeat out of four
        assert_eq!(repeated_bigram_rate(&toks(&[1, 2, 1, 2, 3])), 0.25);
        assert_eq!(repeated_bigram_rate(&toks(&[4])), 0.0);
    }

    #[test]
    fn baseline_row_has_one_expert_and_no_truncation() {
        let spec = ExperimentSpec {
            expert_counts: vec![5],
            ablation_runs: 2,
            steps: 6,
            ..Default::default()
        };
        let report = run_ablation(&spec).unwrap();
        let b = report.get(AblationVariant::Baseline).unwrap();
        assert_eq!(b.num_experts, 1);
        assert_eq!(b.mean_removed, None);
        assert_eq!(b.fused_probability_variance, 0.0);
        assert_eq!(b.majority_agreement, 1.0);
        for t in report
            .sample_traces
            .iter()
            .filter(|(k, _)| k.starts_with("baseline"))
        {
            assert!(t
                .1
                .steps
                .iter()
                .all(|s| s.predictions.len() == 1 && s.filtered.len() == 1));
        }
        assert!(report
            .get(AblationVariant::FusionFull)
            .unwrap()
            .mean_removed
            .is_some());
        assert_eq!(report.to_csv().lines().count(), 5);
        assert_eq!(report.sample_traces.len(), 4 * 2);
    }

    #[test]
    fn no_noise_equals_full_with_zero_noise() {
        let base = ExperimentSpec {
            expert_counts: vec![4],
            ablation_runs: 2,
            ..Default::default()
        };
        let quiet = ExperimentSpec {
            fusion: super::super::FusionSettings {
                base_noise_scale: 0.0,
                ..Default::default()
            },
            ..base.clone()
        };
        let a = run_ablation(&base).unwrap();
        let b = run_ablation(&quiet).unwrap();
        for t in 0..2 {
            let no_noise = &a.sample_traces[&format!("fusion_no_noise_task{t}")];
            let full_quiet = &b.sample_traces[&format!("fusion_full_task{t}")];
            assert_eq!(
                no_noise.to_jsonl_string().unwrap(),
                full_quiet.to_jsonl_string().unwrap()
            );
        }
    }
}
