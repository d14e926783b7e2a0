use std::fmt::Write;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::{distinct_ratio, repeated_bigram_rate};
use super::{fmt_f64, line_plot_svg};
use crate::diversity::{rolling_average, write_file, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::types::GenerationTrace;

/// Name of the subdirectory the bundle is written to; never scanned.
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Path relative to the scanned directory, with `/` separators.
    pub path: String,
    pub prompt: String,
    pub num_experts: usize,
    pub steps: usize,
    pub mean_orthogonality: Option<f64>,
    pub distinct_token_ratio: f64,
    pub repeated_bigram_rate: f64,
    #[serde(skip)]
    orthogonality: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_orthogonality: Option<f64>,
    pub mean_distinct_token_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    /// True when no usable trace was found.
    pub empty: bool,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
    /// Incomplete or unreadable trace files, excluded from the aggregate.
    pub warnings: Vec<String>,
}

fn collect_jsonl(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            if dir == root && path.file_name().is_some_and(|n| n == REPORT_DIR) {
                continue;
            }
            collect_jsonl(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn summarize(path: String, trace: &GenerationTrace<f64>) -> RunSummary {
    let orthogonality: Vec<f64> = trace
        .steps
        .iter()
        .filter_map(|s| s.orthogonality())
        .collect();
    RunSummary {
        path,
        prompt: trace.prompt.clone(),
        num_experts: trace.config.num_experts,
        steps: trace.steps.len(),
        mean_orthogonality: (!orthogonality.is_empty())
            .then(|| orthogonality.iter().sum::<f64>() / orthogonality.len() as f64),
        distinct_token_ratio: distinct_ratio(&trace.tokens),
        repeated_bigram_rate: repeated_bigram_rate(&trace.tokens),
        orthogonality,
    }
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Summarizes every trace under `dir` (recursively, in path order) into
/// `dir/report/report.{json,csv,svg}`. Re-running on the same inputs
/// rewrites identical bytes.
pub fn emit_report(dir: &Path) -> Result<ReportBundle> {
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_jsonl(dir, dir, &mut files)?;
    let mut named: Vec<(String, PathBuf)> =
        files.into_iter().map(|p| (relative(dir, &p), p)).collect();
    named.sort();

    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for (rel, path) in named {
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        match GenerationTrace::<f64>::read_jsonl(BufReader::new(file)) {
            Ok(trace) if trace.complete => runs.push(summarize(rel, &trace)),
            Ok(trace) => warnings.push(format!(
                "{rel}: incomplete trace ({} steps), excluded",
                trace.steps.len()
            )),
            Err(e) => warnings.push(format!("{rel}: not a readable trace ({e}), excluded")),
        }
    }
    let orth: Vec<f64> = runs.iter().filter_map(|r| r.mean_orthogonality).collect();
    let distinct: Vec<f64> = runs.iter().map(|r| r.distinct_token_ratio).collect();
    let bundle = ReportBundle {
        empty: runs.is_empty(),
        aggregate: Aggregate {
            runs: runs.len(),
            mean_orthogonality: mean_of(&orth),
            mean_distinct_token_ratio: mean_of(&distinct),
        },
        runs,
        warnings,
    };

    let out = dir.join(REPORT_DIR);
    let mut json = serde_json::to_string_pretty(&bundle)?;
    json.push('\n');
    write_file(&out.join("report.json"), json.as_bytes())?;

    let mut csv = String::from(
        "path,experts,steps,mean_orthogonality,distinct_token_ratio,repeated_bigram_rate\n",
    );
    for r in &bundle.runs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.path,
            r.num_experts,
            r.steps,
            r.mean_orthogonality.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.distinct_token_ratio),
            fmt_f64(r.repeated_bigram_rate)
        );
    }
    write_file(&out.join("report.csv"), csv.as_bytes())?;

    let mut series = Vec::new();
    for r in bundle.runs.iter().filter(|r| !r.orthogonality.is_empty()) {
        series.push((
            r.path.clone(),
            rolling_average(&r.orthogonality, DEFAULT_WINDOW)?,
        ));
    }
    let title = if bundle.empty {
        "Orthogonality (no runs)"
    } else {
        "Orthogonality"
    };
    write_file(
        &out.join("report.svg"),
        line_plot_svg(&series, title, "orthogonality").as_bytes(),
    )?;
    Ok(bundle)
}
