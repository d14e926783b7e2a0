//! Sources of per-expert predictions.
//!
//! [`MockBackend`] is a seeded, deterministic stand-in for a model;
//! [`HttpBackend`] talks to an OpenAI-compatible completions server that
//! returns token log-probabilities. [`predict_all`] fans one step out over the
//! pool and always returns predictions ordered by expert id.

mod embedding;
mod http;
mod mock;
mod pool;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use embedding::EmbeddingTable;
pub use http::{parse_completion, HttpBackend};
pub use mock::{MockBackend, MOCK_ANSWER_PROBABILITY, MOCK_PROBABILITY_TABLE};
pub use pool::{build_pool, ExpertPool, ExpertPrompt};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{EmbeddingVector, ExpertPrediction, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model_name: String,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// Number of top log-probabilities requested per completion.
    pub logprobs: u32,
    pub mock_seed: u64,
    /// Probability that a mock expert emits the step's shared consensus token.
    pub mock_consensus: f64,
    /// Experts `0..mock_dissenters` always back a distractor token with
    /// `mock_dissenter_probability`.
    pub mock_dissenters: usize,
    pub mock_dissenter_probability: f64,
    /// When set, every mock expert answers token 0 ("correct") or, with this
    /// probability, token 1 ("wrong").
    pub mock_error_rate: Option<f64>,
    /// Artificial latency per mock call.
    pub mock_delay_ms: u64,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Optional embedding table file; otherwise a seeded random table is used.
    pub embedding_table: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "Qwen/Qwen1.5-0.5B".into(),
            request_timeout_ms: 30_000,
            max_retries: 2,
            max_concurrent_requests: 8,
            logprobs: 5,
            mock_seed: 0,
            mock_consensus: 0.7,
            mock_dissenters: 0,
            mock_dissenter_probability: 0.99,
            mock_error_rate: None,
            mock_delay_ms: 0,
            vocab_size: 64,
            embedding_dim: 64,
            embedding_table: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent_requests == 0 {
            return Err(Error::config("max_concurrent_requests must be at least 1"));
        }
        if self.request_timeout_ms == 0 {
            return Err(Error::config("request_timeout_ms must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mock_consensus) {
            return Err(Error::config("mock_consensus must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mock_dissenter_probability) {
            return Err(Error::config(
                "mock_dissenter_probability must lie in [0, 1]",
            ));
        }
        if let Some(q) = self.mock_error_rate {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::config("mock_error_rate must lie in [0, 1]"));
            }
        }
        if self.kind == BackendKind::Mock && self.vocab_size < 2 {
            return Err(Error::config("mock vocabulary needs at least 2 tokens"));
        }
        if self.logprobs == 0 {
            return Err(Error::config("logprobs must be at least 1"));
        }
        Ok(())
    }

    pub fn embedding_table<S: Scalar>(&self) -> Result<EmbeddingTable<S>> {
        match &self.embedding_table {
            Some(path) => EmbeddingTable::load(path),
            None => EmbeddingTable::seeded(self.vocab_size, self.embedding_dim, self.mock_seed),
        }
    }
}

/// The shared decoding context: the task prompt plus every fused token so far,
/// each paired with the (possibly perturbed) embedding fed back for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Context<S> {
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub embeddings: Vec<EmbeddingVector<S>>,
}

impl<S: Scalar> Context<S> {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            tokens: Vec::new(),
            embeddings: Vec::new(),
        }
    }

    pub fn push(&mut self, token: TokenId, embedding: EmbeddingVector<S>) {
        self.tokens.push(token);
        self.embeddings.push(embedding);
    }

    pub fn is_empty(&self) -> bool {
        self.prompt.is_empty() && self.tokens.is_empty()
    }
}

pub trait ExpertBackend<S: Scalar>: Send + Sync {
    /// One attempt at one expert's prediction.
    fn fetch_prediction(
        &self,
        expert: &ExpertPrompt,
        context: &Context<S>,
    ) -> Result<ExpertPrediction<S>>;

    /// How many `fetch_prediction` calls may run at once.
    fn max_concurrency(&self) -> usize {
        1
    }

    fn max_retries(&self) -> u32 {
        0
    }

    fn embeddings(&self) -> &EmbeddingTable<S>;
}

pub fn build_backend<S: Scalar>(config: &BackendConfig) -> Result<Box<dyn ExpertBackend<S>>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Box::new(MockBackend::new(config)?),
        BackendKind::Http => Box::new(HttpBackend::new(config)?),
    })
}

const RETRY_BACKOFF: Duration = Duration::from_millis(20);

fn fetch_with_retries<S: Scalar>(
    backend: &dyn ExpertBackend<S>,
    expert: &ExpertPrompt,
    context: &Context<S>,
) -> Result<ExpertPrediction<S>> {
    let mut attempt = 0;
    loop {
        match backend.fetch_prediction(expert, context) {
            Err(e) if e.is_retryable() && attempt < backend.max_retries() => {
                attempt += 1;
                std::thread::sleep(RETRY_BACKOFF * attempt);
            }
            other => return other,
        }
    }
}

/// One prediction per expert, sorted by expert id.
///
/// Calls run on up to `backend.max_concurrency()` threads; results are merged
/// by expert id after all calls finish. If any expert fails, the whole step
/// fails and names every failing expert.
pub fn predict_all<S: Scalar>(
    pool: &ExpertPool,
    context: &Context<S>,
    backend: &dyn ExpertBackend<S>,
) -> Result<Vec<ExpertPrediction<S>>> {
    if context.is_empty() {
        return Err(Error::config("decoding context is empty"));
    }
    let experts = pool.experts();
    let workers = backend.max_concurrency().clamp(1, experts.len());

    let results: Vec<(usize, Result<ExpertPrediction<S>>)> = if workers == 1 {
        experts
            .iter()
            .enumerate()
            .map(|(i, e)| (i, fetch_with_retries(backend, e, context)))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let out = Mutex::new(Vec::with_capacity(experts.len()));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= experts.len() {
                        break;
                    }
                    let r = fetch_with_retries(backend, &experts[i], context);
                    out.lock().expect("result lock").push((i, r));
                });
            }
        });
        out.into_inner().expect("result lock")
    };

    let mut ok = Vec::with_capacity(experts.len());
    let mut failed: Vec<(usize, Error)> = Vec::new();
    for (i, r) in results {
        match r {
            Ok(p) if p.expert_id == experts[i].expert_id => ok.push(p),
            Ok(p) => failed.push((
                experts[i].expert_id,
                Error::Internal(format!("backend answered as expert {}", p.expert_id)),
            )),
            Err(e) => failed.push((experts[i].expert_id, e)),
        }
    }
    if !failed.is_empty() {
        failed.sort_by_key(|(id, _)| *id);
        let detail = failed[0].1.to_string();
        return Err(Error::Step {
            expert_ids: failed.into_iter().map(|(id, _)| id).collect(),
            detail,
        });
    }
    ok.sort_by_key(|p| p.expert_id);
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        table: EmbeddingTable<f64>,
        fail: Vec<usize>,
    }

    impl ExpertBackend<f64> for Flaky {
        fn fetch_prediction(
            &self,
            e: &ExpertPrompt,
            _: &Context<f64>,
        ) -> Result<ExpertPrediction<f64>> {
            if self.fail.contains(&e.expert_id) {
                return Err(Error::Protocol("no logprobs".into()));
            }
            ExpertPrediction::new(
                e.expert_id,
                TokenId(0),
                0.5,
                self.table.get(TokenId(0))?.clone(),
            )
        }
        fn max_concurrency(&self) -> usize {
            3
        }
        fn embeddings(&self) -> &EmbeddingTable<f64> {
            &self.table
        }
    }

    #[test]
    fn failures_name_every_failing_expert() {
        let backend = Flaky {
            table: EmbeddingTable::seeded(2, 4, 0).unwrap(),
            fail: vec![4, 1],
        };
        let pool = ExpertPool::default_with(6).unwrap();
        match predict_all(&pool, &Context::new("q"), &backend) {
            Err(Error::Step { expert_ids, .. }) => assert_eq!(expert_ids, vec![1, 4]),
            other => panic!("{other:?}"),
        }
        let ok = Flaky {
            table: EmbeddingTable::seeded(2, 4, 0).unwrap(),
            fail: vec![],
        };
        let preds = predict_all(&pool, &Context::new("q"), &ok).unwrap();
        assert_eq!(
            preds.iter().map(|p| p.expert_id).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        assert!(predict_all(&pool, &Context::new(""), &ok).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let bad = BackendConfig {
            max_concurrent_requests: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackendConfig {
            mock_consensus: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"kind":"http","base_url":"http://x"}"#;
        let cfg: BackendConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.kind, BackendKind::Http);
        assert_eq!(cfg.max_retries, 2);
    }
}
