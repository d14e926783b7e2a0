use std::fmt::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use super::generate::{generate, trace_file_name, write_trace};
use super::{fmt_f64, line_plot_svg, ExperimentSpec};
use crate::backend::build_backend;
use crate::diversity::{heatmap_export, write_file, OrthogonalityTrace, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::types::GenerationTrace;

/// Orthogonality series of one (task, expert count) run.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub task_index: usize,
    pub num_experts: usize,
    /// Mock consensus used for this cell, when the spec maps one.
    pub consensus: Option<f64>,
    pub scores: OrthogonalityTrace<f64>,
    pub trace: GenerationTrace<f64>,
}

impl SweepCell {
    pub fn mean_orthogonality(&self) -> f64 {
        self.scores.raw.iter().sum::<f64>() / self.scores.raw.len().max(1) as f64
    }

    fn stem(&self) -> String {
        trace_file_name(self.task_index, self.num_experts)
            .trim_end_matches(".jsonl")
            .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// Ordered by task, then by position in `expert_counts`.
    pub cells: Vec<SweepCell>,
    pub files: Vec<PathBuf>,
}

/// Runs the (task x expert count) grid in parallel without touching disk.
/// Every cell needs at least two experts.
pub fn sweep_cells(spec: &ExperimentSpec) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    if let Some(n) = spec.expert_counts.iter().find(|&&n| n < 2) {
        return Err(Error::config(format!(
            "orthogonality needs at least 2 experts per run, got {n}"
        )));
    }
    let grid: Vec<(usize, usize)> = (0..spec.tasks.len())
        .flat_map(|t| spec.expert_counts.iter().map(move |&n| (t, n)))
        .collect();
    let outcomes: Vec<Result<(SweepCell, Option<Error>)>> = grid
        .par_iter()
        .map(|&(task_index, n)| {
            let backend = build_backend(&spec.backend_for(n, true))?;
            let config = spec.fusion.config(n, spec.noise_seed(task_index, n, 0))?;
            let out = generate(
                &spec.tasks[task_index],
                &spec.pool(n)?,
                backend.as_ref(),
                &config,
                spec.steps,
            )?;
            let raw: Vec<f64> = out
                .trace
                .steps
                .iter()
                .map(|s| s.orthogonality().unwrap_or(f64::NAN))
                .collect();
            let cell = SweepCell {
                task_index,
                num_experts: n,
                consensus: spec.consensus_by_count.get(&n).copied(),
                scores: OrthogonalityTrace::new(raw, DEFAULT_WINDOW)?,
                trace: out.trace,
            };
            Ok((cell, out.error))
        })
        .collect();
    let mut cells = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for o in outcomes {
        let (cell, err) = o?;
        if first_error.is_none() {
            first_error = err;
        }
        cells.push(cell);
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(cells),
    }
}

/// Runs the grid and writes, under the output directory:
/// `traces/*.jsonl`, `orthogonality/*.csv` per cell, a combined
/// `orthogonality.csv`, `heatmaps/*.svg` at the heatmap step and the line
/// plot `orthogonality.svg`.
pub fn run_orthogonality_experiment(spec: &ExperimentSpec) -> Result<SweepOutput> {
    let cells = sweep_cells(spec)?;
    let out = &spec.output_dir;
    let mut files = Vec::new();
    let mut combined = String::from("task,experts,step,score,smoothed\n");
    let mut series = Vec::new();
    let heat_step = spec
        .heatmap_step
        .unwrap_or(spec.steps / 2)
        .min(spec.steps - 1);
    for cell in &cells {
        let stem = cell.stem();
        let trace_path = out.join("traces").join(format!("{stem}.jsonl"));
        write_trace(&trace_path, &cell.trace)?;
        let csv_path = out.join("orthogonality").join(format!("{stem}.csv"));
        cell.scores.write_csv(&csv_path)?;
        for (t, (r, s)) in cell
            .scores
            .raw
            .iter()
            .zip(&cell.scores.smoothed)
            .enumerate()
        {
            let _ = writeln!(
                combined,
                "{},{},{t},{},{}",
                cell.task_index,
                cell.num_experts,
                fmt_f64(*r),
                fmt_f64(*s)
            );
        }
        if let Some(sim) = cell
            .trace
            .steps
            .get(heat_step)
            .and_then(|s| s.similarity.as_ref())
        {
            let path = out.join("heatmaps").join(format!("{stem}.svg"));
            let title = format!("{} experts, task {}", cell.num_experts, cell.task_index);
            heatmap_export(sim, &title, &path)?;
            files.push(path);
        }
        series.push((
            format!("task {} / {} experts", cell.task_index, cell.num_experts),
            cell.scores.smoothed.clone(),
        ));
        files.push(trace_path);
        files.push(csv_path);
    }
    let combined_path = out.join("orthogonality.csv");
    write_file(&combined_path, combined.as_bytes())?;
    let plot_path = out.join("orthogonality.svg");
    let title = format!("Orthogonality ({}-step rolling mean)", DEFAULT_WINDOW);
    write_file(
        &plot_path,
        line_plot_svg(&series, &title, "orthogonality").as_bytes(),
    )?;
    files.push(combined_path);
    files.push(plot_path);
    Ok(SweepOutput { cells, files })
}
