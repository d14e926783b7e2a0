use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::generate::generate;
use super::{AblationVariant, ExperimentSpec};
use crate::backend::{build_backend, BackendConfig, BackendKind, EmbeddingTable};
use crate::diversity::write_file;
use crate::error::{Error, Result};
use crate::types::TokenId;

/// Text the answer-mode mock produces for a wrong answer.
pub const MOCK_WRONG_ANSWER: &str = "[no answer]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Factual,
    Hallucinated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub question: String,
    pub output: String,
    pub verdict: Verdict,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: AblationVariant,
    pub num_experts: usize,
    pub total: usize,
    pub hallucinated: usize,
    pub hallucination_rate: f64,
    /// Wall-clock mean per question.
    pub mean_latency_ms: f64,
    pub cases: Vec<CaseResult>,
}

/// One JSON object per line; blank lines are skipped. Line numbers in
/// errors are 1-based; line 0 refers to the file as a whole.
pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let fixture = |line: usize, detail: String| Error::Fixture {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fixture(0, e.to_string()))?;
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase =
            serde_json::from_str(line).map_err(|e| fixture(i + 1, e.to_string()))?;
        if case.references.is_empty() || case.references.iter().all(|r| normalize(r).is_empty()) {
            return Err(fixture(i + 1, "case has no reference answers".into()));
        }
        cases.push(case);
    }
    if cases.is_empty() {
        return Err(fixture(0, "no evaluation cases".into()));
    }
    Ok(cases)
}

/// Lowercase with every whitespace run collapsed to one space.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Factual when the normalized output contains any normalized reference.
pub fn judge(output: &str, references: &[String]) -> Verdict {
    let out = normalize(output);
    let hit = references
        .iter()
        .map(|r| normalize(r))
        .any(|r| !r.is_empty() && out.contains(&r));
    if hit {
        Verdict::Factual
    } else {
        Verdict::Hallucinated
    }
}

/// Answer-mode mock tokens stand for the first reference (token 0) or a wrong
/// answer; otherwise tokens render through the vocabulary, or as
/// `token_id:<n>` without one.
fn render(
    tokens: &[TokenId],
    case: &EvalCase,
    backend: &BackendConfig,
    table: &EmbeddingTable<f64>,
) -> String {
    let answer_mode = backend.kind == BackendKind::Mock && backend.mock_error_rate.is_some();
    let mut out = String::new();
    for &t in tokens {
        if answer_mode {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(if t == TokenId(0) {
                &case.references[0]
            } else {
                MOCK_WRONG_ANSWER
            });
        } else {
            match table.token_text(t) {
                Some(s) => out.push_str(s),
                None => out.push_str(&format!(" token_id:{t}")),
            }
        }
    }
    out
}

/// Answers every case with `variant` and judges the output. The fused
/// variants use `expert_counts[0]` experts.
pub fn run_eval(
    spec: &ExperimentSpec,
    cases: &[EvalCase],
    variant: AblationVariant,
) -> Result<EvalReport> {
    spec.validate()?;
    let n = variant.num_experts(spec.expert_counts[0]);
    let mut backend_cfg = spec.backend.clone();
    backend_cfg.mock_seed = spec.seed;
    let backend = build_backend(&backend_cfg)?;
    let pool = spec.pool(n)?;
    let settings = variant.settings(&spec.fusion);
    let mut results = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let config = settings.config(n, spec.noise_seed(i, n, 0))?;
        let start = Instant::now();
        let trace = generate(
            &case.question,
            &pool,
            backend.as_ref(),
            &config,
            spec.eval_tokens,
        )?
        .into_result()?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let output = render(&trace.tokens, case, &backend_cfg, backend.embeddings());
        results.push(CaseResult {
            question: case.question.clone(),
            verdict: judge(&output, &case.references),
            output,
            latency_ms,
        });
    }
    let total = results.len();
    let hallucinated = results
        .iter()
        .filter(|r| r.verdict == Verdict::Hallucinated)
        .count();
    Ok(EvalReport {
        variant,
        num_experts: n,
        total,
        hallucinated,
        hallucination_rate: if total == 0 {
            0.0
        } else {
            hallucinated as f64 / total as f64
        },
        mean_latency_ms: if total == 0 {
            0.0
        } else {
            results.iter().map(|r| r.latency_ms).sum::<f64>() / total as f64
        },
        cases: results,
    })
}

pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<PathBuf> {
    let path = dir.join("eval").join(format!("{}.json", report.variant));
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    Ok(path)
}
