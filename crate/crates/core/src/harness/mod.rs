//! Experiment orchestration behind the `vmoe` command line: generation runs,
//! the expert-count orthogonality sweep, the four-way ablation, the
//! reference-match evaluation and report emission.
//!
//! The harness fixes the scalar to `f64`.

mod ablation;
mod eval;
mod generate;
mod plot;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationReport, VariantMetrics};
pub use eval::{
    judge, load_cases, normalize, run_eval, write_eval_report, CaseResult, EvalCase, EvalReport,
    Verdict, MOCK_WRONG_ANSWER,
};
pub use generate::{generate, generate_all, run_generation, trace_file_name, GenerationOutcome};
pub use plot::line_plot_svg;
pub use report::{emit_report, ReportBundle, RunSummary};
pub use sweep::{run_orthogonality_experiment, sweep_cells, SweepCell, SweepOutput};

use crate::backend::{BackendConfig, BackendKind, ExpertPool};
use crate::error::{Error, Result};
use crate::rng::WordHasher;
use crate::scalar::nonfinite;
use crate::types::{EmptyTruncationPolicy, FusionConfig};

/// Fusion knobs shared by every run of an experiment; `num_experts` and the
/// noise seed are filled in per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    /// Experts kept by top-k selection; `None` keeps all of them. Larger
    /// values are clamped to the run's expert count.
    pub top_k: Option<usize>,
    #[serde(with = "nonfinite")]
    pub threshold_multiplier: f64,
    pub base_noise_scale: f64,
    pub empty_truncation_policy: EmptyTruncationPolicy,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            top_k: None,
            threshold_multiplier: 1.0,
            base_noise_scale: 0.1,
            empty_truncation_policy: EmptyTruncationPolicy::KeepAll,
        }
    }
}

impl FusionSettings {
    pub fn config(&self, num_experts: usize, noise_seed: u64) -> Result<FusionConfig<f64>> {
        let config = FusionConfig {
            num_experts,
            top_k: self.top_k.unwrap_or(num_experts).min(num_experts),
            threshold_multiplier: self.threshold_multiplier,
            base_noise_scale: self.base_noise_scale,
            noise_seed,
            empty_truncation_policy: self.empty_truncation_policy,
            tie_break_final: Default::default(),
        };
        config.validate()?;
        Ok(config)
    }
}

/// One experiment, as read from the `--config` JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub expert_counts: Vec<usize>,
    pub tasks: Vec<String>,
    pub steps: usize,
    /// Master seed; drives the mock backend and every noise stream.
    pub seed: u64,
    pub fusion: FusionSettings,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    /// JSONL file of `{"expert_id", "prompt"}`; built-in domains otherwise.
    pub expert_prompts: Option<PathBuf>,
    /// Mock consensus per expert count for the orthogonality sweep.
    pub consensus_by_count: BTreeMap<usize, f64>,
    pub eval_cases: Option<PathBuf>,
    /// Tokens generated per evaluation question.
    pub eval_tokens: usize,
    /// Seeded repetitions per ablation variant.
    pub ablation_runs: usize,
    /// Step whose similarity matrix is drawn as a heatmap; defaults to the middle.
    pub heatmap_step: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "vmoe".into(),
            expert_counts: vec![128, 32, 3],
            tasks: vec![
                "Tell a story".into(),
                "Predict the 2025 world economic outlook".into(),
            ],
            steps: 10,
            seed: 0,
            fusion: FusionSettings::default(),
            backend: BackendConfig::default(),
            output_dir: PathBuf::from("vmoe-out"),
            expert_prompts: None,
            consensus_by_count: BTreeMap::from([(128, 0.95), (32, 0.7), (3, 0.1)]),
            eval_cases: None,
            eval_tokens: 1,
            ablation_runs: 20,
            heatmap_step: None,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub experts: Option<Vec<usize>>,
    pub cases: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(steps) = o.steps {
            self.steps = steps;
        }
        if let Some(experts) = &o.experts {
            self.expert_counts = experts.clone();
        }
        if let Some(cases) = &o.cases {
            self.eval_cases = Some(cases.clone());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.expert_counts.is_empty() {
            return Err(Error::config("expert_counts must not be empty"));
        }
        if self.expert_counts.contains(&0) {
            return Err(Error::config("expert counts must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("tasks must not be empty"));
        }
        if self.eval_tokens == 0 {
            return Err(Error::config("eval_tokens must be at least 1"));
        }
        if let Some((n, c)) = self
            .consensus_by_count
            .iter()
            .find(|(_, c)| !(0.0..=1.0).contains(*c))
        {
            return Err(Error::config(format!(
                "consensus for {n} experts is {c}, outside [0, 1]"
            )));
        }
        self.fusion.config(1, 0)?;
        self.backend.validate()
    }

    /// The first `n` experts of the configured pool.
    pub fn pool(&self, n: usize) -> Result<ExpertPool> {
        match &self.expert_prompts {
            Some(path) => ExpertPool::load(path)?.first(n),
            None => ExpertPool::default_with(n),
        }
    }

    /// Noise seed of one run, derived from the master seed and the run key.
    pub fn noise_seed(&self, task_index: usize, num_experts: usize, repetition: u64) -> u64 {
        WordHasher::new(self.seed)
            .word(task_index as u64)
            .word(num_experts as u64)
            .word(repetition)
            .finish()
    }

    fn backend_for(&self, num_experts: usize, use_consensus_map: bool) -> BackendConfig {
        let mut backend = self.backend.clone();
        backend.mock_seed = self.seed;
        if use_consensus_map {
            if let Some(&c) = self.consensus_by_count.get(&num_experts) {
                backend.mock_consensus = c;
            }
        }
        backend
    }
}

/// The four ablation configurations. Each differs from `fusion_full` by
/// configuration only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// A single prompted expert: N=1, no truncation, no noise.
    Baseline,
    FusionFull,
    FusionNoTruncation,
    FusionNoNoise,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Baseline,
        AblationVariant::FusionFull,
        AblationVariant::FusionNoTruncation,
        AblationVariant::FusionNoNoise,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::FusionFull => "fusion_full",
            AblationVariant::FusionNoTruncation => "fusion_no_truncation",
            AblationVariant::FusionNoNoise => "fusion_no_noise",
        }
    }

    pub fn num_experts(self, fused: usize) -> usize {
        match self {
            AblationVariant::Baseline => 1,
            _ => fused,
        }
    }

    /// Fusion settings of this variant, derived from the experiment's.
    pub fn settings(self, base: &FusionSettings) -> FusionSettings {
        let mut s = base.clone();
        match self {
            AblationVariant::Baseline => {
                s.top_k = Some(1);
                s.threshold_multiplier = f64::INFINITY;
                s.base_noise_scale = 0.0;
            }
            AblationVariant::FusionFull => {}
            AblationVariant::FusionNoTruncation => s.threshold_multiplier = f64::INFINITY,
            AblationVariant::FusionNoNoise => s.base_noise_scale = 0.0,
        }
        s
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Fixed-precision float for CSV output.
pub(crate) fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}
