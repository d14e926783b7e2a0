use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, Context, EmbeddingTable, ExpertBackend, ExpertPrompt};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{ExpertPrediction, TokenId};

/// Client for `POST {base_url}/v1/completions` on an OpenAI-compatible server.
///
/// Each call asks for a single greedy token with its top log-probabilities and
/// takes the most likely entry. Tokens are mapped to ids through the embedding
/// table's token strings when present, otherwise the server must return ids
/// as `"token_id:<n>"` or bare integers. Perturbed context embeddings cannot
/// be sent over this protocol; the server only sees token text.
pub struct HttpBackend<S> {
    agent: ureq::Agent,
    url: String,
    model: String,
    logprobs: u32,
    max_retries: u32,
    concurrency: usize,
    table: EmbeddingTable<S>,
}

impl<S: Scalar> HttpBackend<S> {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/v1/completions", config.base_url.trim_end_matches('/')),
            model: config.model_name.clone(),
            logprobs: config.logprobs,
            max_retries: config.max_retries,
            concurrency: config.max_concurrent_requests,
            table: config.embedding_table()?,
        })
    }

    /// Expert framing, newline, then the shared context as text.
    pub fn render_prompt(&self, expert: &ExpertPrompt, context: &Context<S>) -> String {
        let mut text = format!("{}\n{}", expert.prompt, context.prompt);
        for &t in &context.tokens {
            match self.table.token_text(t) {
                Some(s) => text.push_str(s),
                None => text.push_str(&format!(" token_id:{t}")),
            }
        }
        text
    }

    pub fn request_body(&self, expert: &ExpertPrompt, context: &Context<S>) -> Value {
        json!({
            "model": self.model,
            "prompt": self.render_prompt(expert, context),
            "max_tokens": 1,
            "logprobs": self.logprobs,
            "temperature": 0,
        })
    }
}

fn classify(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(t) => Error::Retryable(format!("timeout: {t}")),
        ureq::Error::Io(io) => Error::Retryable(format!("i/o: {io}")),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            Error::Retryable(e.to_string())
        }
        other => Error::Protocol(other.to_string()),
    }
}

/// Extracts `(token, probability)` of the most likely entry in
/// `choices[0].logprobs.top_logprobs[0]`.
pub fn parse_completion<S: Scalar>(
    body: &Value,
    table: &EmbeddingTable<S>,
) -> Result<(TokenId, f64)> {
    let top = body
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or_else(|| {
            Error::Protocol("response has no choices[0].logprobs.top_logprobs[0]".into())
        })?;
    let mut best: Option<(&str, f64)> = None;
    for (text, lp) in top {
        let lp = lp.as_f64().ok_or_else(|| {
            Error::Protocol(format!("log-probability of {text:?} is not a number"))
        })?;
        if best.is_none_or(|(_, b)| lp > b) {
            best = Some((text, lp));
        }
    }
    let (text, lp) = best.ok_or_else(|| Error::Protocol("top_logprobs[0] is empty".into()))?;
    let p = lp.exp();
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Protocol(format!(
            "log-probability {lp} for {text:?} gives probability {p}"
        )));
    }
    let token = table
        .lookup(text)
        .or_else(|| {
            text.strip_prefix("token_id:")
                .unwrap_or(text)
                .trim()
                .parse::<u32>()
                .ok()
                .map(TokenId)
        })
        .ok_or_else(|| Error::Protocol(format!("cannot map token {text:?} to an id")))?;
    Ok((token, p))
}

impl<S: Scalar> ExpertBackend<S> for HttpBackend<S> {
    fn fetch_prediction(
        &self,
        expert: &ExpertPrompt,
        context: &Context<S>,
    ) -> Result<ExpertPrediction<S>> {
        let response = self
            .agent
            .post(&self.url)
            .send_json(self.request_body(expert, context))
            .map_err(classify)?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Error::Retryable(format!("server answered {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Error::Protocol(format!("server answered {status}")));
        }
        let body: Value = response.into_body().read_json().map_err(|e| match e {
            ureq::Error::Timeout(_) | ureq::Error::Io(_) => classify(e),
            other => Error::Protocol(format!("invalid JSON body: {other}")),
        })?;
        let (token, p) = parse_completion(&body, &self.table)?;
        let embedding = self.table.get(token)?.clone();
        ExpertPrediction::new(expert.expert_id, token, S::of(p), embedding)
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }

    fn max_retries(&self) -> u32 {
        self.max_retries
    }

    fn embeddings(&self) -> &EmbeddingTable<S> {
        &self.table
    }
}
