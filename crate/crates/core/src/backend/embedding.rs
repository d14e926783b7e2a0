use std::collections::HashMap;
use std::path::Path;

use rand::RngCore;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, WordHasher};
use crate::scalar::Scalar;
use crate::types::{EmbeddingVector, TokenId};

const TABLE_TAG: u64 = 0x454d_4245_4444_494e;

/// Token embeddings, optionally with the token strings they belong to.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<S> {
    dim: usize,
    rows: Vec<EmbeddingVector<S>>,
    tokens: Option<Vec<String>>,
    index: HashMap<String, TokenId>,
}

#[derive(Deserialize)]
struct TableFile {
    dim: usize,
    rows: Vec<Vec<f64>>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Unit-norm rows with components drawn uniformly from `[-1, 1)` using
    /// integer draws only, so the table is identical on every platform.
    pub fn seeded(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::config(
                "embedding table needs vocab_size >= 1 and dim >= 1",
            ));
        }
        let mut rng = stream_rng(WordHasher::new(seed).word(TABLE_TAG).finish(), 0);
        let rows = (0..vocab_size)
            .map(|_| {
                let raw: Vec<f64> = (0..dim)
                    .map(|_| (rng.next_u32() as f64) / 2_147_483_648.0 - 1.0)
                    .collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                let unit: Vec<S> = if norm > 0.0 {
                    raw.iter().map(|x| S::of(x / norm)).collect()
                } else {
                    let mut v = vec![S::zero(); dim];
                    v[0] = S::one();
                    v
                };
                EmbeddingVector::new(unit)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows, None)
    }

    pub fn from_rows(rows: Vec<EmbeddingVector<S>>, tokens: Option<Vec<String>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.dim())
            .ok_or_else(|| Error::config("embedding table is empty"))?;
        if let Some(i) = rows.iter().position(|r| r.dim() != dim) {
            return Err(Error::config(format!(
                "embedding row {i} has the wrong dimension"
            )));
        }
        let mut index = HashMap::new();
        if let Some(tokens) = &tokens {
            if tokens.len() != rows.len() {
                return Err(Error::config(format!(
                    "{} token strings for {} embedding rows",
                    tokens.len(),
                    rows.len()
                )));
            }
            for (i, t) in tokens.iter().enumerate() {
                index.entry(t.clone()).or_insert(TokenId(i as u32));
            }
        }
        Ok(Self {
            dim,
            rows,
            tokens,
            index,
        })
    }

    /// JSON document `{"dim": d, "rows": [[..], ..], "tokens": [..]}`;
    /// `tokens` is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TableFile = serde_json::from_str(&text)?;
        let rows = file
            .rows
            .into_iter()
            .map(|r| {
                if r.len() != file.dim {
                    return Err(Error::config(format!(
                        "{}: row of length {} in a table of dim {}",
                        path.display(),
                        r.len(),
                        file.dim
                    )));
                }
                EmbeddingVector::new(r.into_iter().map(S::of).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows, file.tokens)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, token: TokenId) -> Result<&EmbeddingVector<S>> {
        self.rows.get(token.index()).ok_or_else(|| {
            Error::Protocol(format!(
                "token {token} outside the embedding table of {} rows",
                self.rows.len()
            ))
        })
    }

    pub fn lookup(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    pub fn token_text(&self, token: TokenId) -> Option<&str> {
        self.tokens
            .as_ref()
            .and_then(|t| t.get(token.index()))
            .map(String::as_str)
    }
}
