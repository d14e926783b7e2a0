use std::time::Duration;

use rand::Rng;

use super::{BackendConfig, Context, EmbeddingTable, ExpertBackend, ExpertPrompt};
use crate::error::Result;
use crate::rng::{stream_rng, WordHasher};
use crate::scalar::Scalar;
use crate::types::{ExpertPrediction, TokenId};

/// Probabilities a mock expert reports for its own token: the 16 midpoint
/// quantiles `(i + 0.5) / 16` of a Beta(2, 2) distribution, rounded to 4
/// places. Indexed by an integer draw, so no float transcendentals are
/// involved in sampling.
pub const MOCK_PROBABILITY_TABLE: [f64; 16] = [
    0.1059, 0.1891, 0.2500, 0.3022, 0.3496, 0.3943, 0.4372, 0.4792, 0.5208, 0.5628, 0.6057, 0.6504,
    0.6978, 0.7500, 0.8109, 0.8941,
];

/// Probability reported by every expert in answer mode (`mock_error_rate`).
pub const MOCK_ANSWER_PROBABILITY: f64 = 0.75;

const STEP_STREAM: u64 = 0;

/// Seeded first-order stand-in for a prompted model.
///
/// Each step is keyed by the seed and the last context entry (token and the
/// exact bits of its fed-back embedding), or by the prompt text before any
/// token has been generated. From that key a shared consensus token and a
/// distractor are drawn; expert `i` then draws from its own stream `i + 1`:
/// with probability `mock_consensus` it emits the consensus token, otherwise
/// a uniform vocabulary token, and reports a probability from
/// [`MOCK_PROBABILITY_TABLE`]. Because only the last entry matters, a
/// noise-free run revisits earlier states and falls into cycles.
#[derive(Debug, Clone)]
pub struct MockBackend<S> {
    seed: u64,
    consensus: f64,
    dissenters: usize,
    dissenter_probability: f64,
    error_rate: Option<f64>,
    delay: Duration,
    concurrency: usize,
    table: EmbeddingTable<S>,
}

impl<S: Scalar> MockBackend<S> {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            seed: config.mock_seed,
            consensus: config.mock_consensus,
            dissenters: config.mock_dissenters,
            dissenter_probability: config.mock_dissenter_probability,
            error_rate: config.mock_error_rate,
            delay: Duration::from_millis(config.mock_delay_ms),
            concurrency: config.max_concurrent_requests,
            table: config.embedding_table()?,
        })
    }

    fn context_key(&self, context: &Context<S>) -> u64 {
        let h = WordHasher::new(self.seed);
        match (context.tokens.last(), context.embeddings.last()) {
            (Some(token), Some(embedding)) => embedding
                .as_slice()
                .iter()
                .fold(h.word(1).word(token.0 as u64), |h, c| {
                    h.word(c.to_bits_u64())
                })
                .finish(),
            _ => h.word(0).bytes(context.prompt.as_bytes()).finish(),
        }
    }

    /// `(consensus, distractor)` for the step keyed by `key`; always distinct.
    fn step_tokens(&self, key: u64) -> (TokenId, TokenId) {
        let v = self.table.vocab_size() as u32;
        let mut rng = stream_rng(key, STEP_STREAM);
        let consensus = rng.random_range(0..v);
        let distractor = (consensus + 1 + rng.random_range(0..v - 1)) % v;
        (TokenId(consensus), TokenId(distractor))
    }

    pub fn consensus_token(&self, context: &Context<S>) -> TokenId {
        self.step_tokens(self.context_key(context)).0
    }

    fn choose(&self, expert_id: usize, key: u64) -> (TokenId, f64) {
        let mut rng = stream_rng(key, expert_id as u64 + 1);
        if let Some(q) = self.error_rate {
            let token = if rng.random_bool(q) {
                TokenId(1)
            } else {
                TokenId(0)
            };
            return (token, MOCK_ANSWER_PROBABILITY);
        }
        let (consensus, distractor) = self.step_tokens(key);
        if expert_id < self.dissenters {
            return (distractor, self.dissenter_probability);
        }
        let token = if rng.random_bool(self.consensus) {
            consensus
        } else {
            TokenId(rng.random_range(0..self.table.vocab_size() as u32))
        };
        let p = MOCK_PROBABILITY_TABLE[rng.random_range(0..MOCK_PROBABILITY_TABLE.len())];
        (token, p)
    }
}

impl<S: Scalar> ExpertBackend<S> for MockBackend<S> {
    fn fetch_prediction(
        &self,
        expert: &ExpertPrompt,
        context: &Context<S>,
    ) -> Result<ExpertPrediction<S>> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let (token, p) = self.choose(expert.expert_id, self.context_key(context));
        ExpertPrediction::new(
            expert.expert_id,
            token,
            S::of(p),
            self.table.get(token)?.clone(),
        )
    }

    fn max_concurrency(&self) -> usize {
        // Sleeping calls benefit from overlap; instant ones do not.
        if self.delay.is_zero() {
            1
        } else {
            self.concurrency
        }
    }

    fn embeddings(&self) -> &EmbeddingTable<S> {
        &self.table
    }
}
