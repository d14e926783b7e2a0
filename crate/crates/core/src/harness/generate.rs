use std::path::{Path, PathBuf};

use super::ExperimentSpec;
use crate::backend::{build_backend, predict_all, Context, ExpertBackend, ExpertPool};
use crate::diversity::write_file;
use crate::error::{Error, Result};
use crate::fusion::fuse_step;
use crate::noise::apply_noise_to_step;
use crate::types::{FusionConfig, GenerationTrace};

/// A finished or aborted run. `error` is set exactly when `trace.complete`
/// is false.
#[derive(Debug)]
pub struct GenerationOutcome {
    pub trace: GenerationTrace<f64>,
    pub error: Option<Error>,
}

impl GenerationOutcome {
    pub fn into_result(self) -> Result<GenerationTrace<f64>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.trace),
        }
    }
}

/// Decodes `steps` fused tokens for `prompt`.
///
/// Each step: every expert predicts from the shared context, the predictions
/// are fused, and the winner enters the context with its perturbed
/// embedding. A backend failure stops the run and returns the steps so far
/// with `complete = false`; other errors are returned directly.
pub fn generate(
    prompt: &str,
    pool: &ExpertPool,
    backend: &dyn ExpertBackend<f64>,
    config: &FusionConfig<f64>,
    steps: usize,
) -> Result<GenerationOutcome> {
    config.validate()?;
    if pool.len() != config.num_experts {
        return Err(Error::config(format!(
            "pool has {} experts, config expects {}",
            pool.len(),
            config.num_experts
        )));
    }
    let mut context = Context::new(prompt);
    let mut trace = GenerationTrace::new(config.clone(), prompt);
    for step in 0..steps {
        let predictions = match predict_all(pool, &context, backend) {
            Ok(p) => p,
            Err(e) if e.exit_code() == 2 => {
                trace.complete = false;
                return Ok(GenerationOutcome {
                    trace,
                    error: Some(e),
                });
            }
            Err(e) => return Err(e),
        };
        let record = fuse_step(step, &predictions, config)?;
        let (embedding, _) = apply_noise_to_step(&record, config)?;
        context.push(record.winner, embedding);
        trace.push(record);
    }
    Ok(GenerationOutcome { trace, error: None })
}

/// One cell of an experiment: task `task_index` with `num_experts` experts.
pub fn run_generation(
    spec: &ExperimentSpec,
    task_index: usize,
    num_experts: usize,
) -> Result<GenerationOutcome> {
    spec.validate()?;
    let prompt = spec
        .tasks
        .get(task_index)
        .ok_or_else(|| Error::config(format!("no task with index {task_index}")))?;
    let backend = build_backend(&spec.backend_for(num_experts, false))?;
    let config = spec
        .fusion
        .config(num_experts, spec.noise_seed(task_index, num_experts, 0))?;
    generate(
        prompt,
        &spec.pool(num_experts)?,
        backend.as_ref(),
        &config,
        spec.steps,
    )
}

pub fn trace_file_name(task_index: usize, num_experts: usize) -> String {
    format!("task{task_index}_n{num_experts}.jsonl")
}

pub(crate) fn write_trace(path: &Path, trace: &GenerationTrace<f64>) -> Result<()> {
    write_file(path, trace.to_jsonl_string()?.as_bytes())
}

/// Runs every (task, expert count) cell and writes `traces/*.jsonl` under the
/// output directory. Stops at the first failing run after persisting its
/// partial trace.
pub fn generate_all(spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut written = Vec::new();
    for task_index in 0..spec.tasks.len() {
        for &n in &spec.expert_counts {
            let outcome = run_generation(spec, task_index, n)?;
            let path = spec
                .output_dir
                .join("traces")
                .join(trace_file_name(task_index, n));
            write_trace(&path, &outcome.trace)?;
            written.push(path);
            if let Some(e) = outcome.error {
                return Err(e);
            }
        }
    }
    Ok(written)
}
