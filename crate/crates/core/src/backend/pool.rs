use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPrompt {
    pub expert_id: usize,
    /// Framing prepended to the shared context.
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPool {
    experts: Vec<ExpertPrompt>,
}

/// Perspectives cycled through by [`ExpertPool::default_with`].
const DOMAINS: &[&str] = &[
    "historian",
    "economist",
    "physicist",
    "biologist",
    "novelist",
    "journalist",
    "statistician",
    "philosopher",
    "engineer",
    "physician",
    "lawyer",
    "geographer",
    "psychologist",
    "poet",
    "chemist",
    "political scientist",
];

/// Assigns expert ids `0..N` in input order.
pub fn build_pool(prompts: Vec<String>) -> Result<ExpertPool> {
    if prompts.is_empty() {
        return Err(Error::config("expert pool needs at least one prompt"));
    }
    let experts = prompts
        .into_iter()
        .enumerate()
        .map(|(expert_id, prompt)| ExpertPrompt { expert_id, prompt })
        .collect();
    ExpertPool::new(experts)
}

impl ExpertPool {
    pub fn new(mut experts: Vec<ExpertPrompt>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::config("expert pool needs at least one prompt"));
        }
        let mut seen = BTreeSet::new();
        for e in &experts {
            if e.prompt.trim().is_empty() {
                return Err(Error::config(format!(
                    "expert {}: empty prompt",
                    e.expert_id
                )));
            }
            if !seen.insert(e.expert_id) {
                return Err(Error::config(format!(
                    "duplicate expert id {}",
                    e.expert_id
                )));
            }
        }
        experts.sort_by_key(|e| e.expert_id);
        Ok(Self { experts })
    }

    /// `n` generic perspectives, one per expert.
    pub fn default_with(n: usize) -> Result<Self> {
        build_pool(
            (0..n)
                .map(|i| {
                    let domain = DOMAINS[i % DOMAINS.len()];
                    let round = i / DOMAINS.len();
                    if round == 0 {
                        format!("You are an expert {domain}. Answer from that perspective.")
                    } else {
                        format!(
                            "You are an expert {domain} (viewpoint {}). Answer from that perspective.",
                            round + 1
                        )
                    }
                })
                .collect(),
        )
    }

    /// JSONL with one `{"expert_id": .., "prompt": ..}` object per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut experts = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ExpertPrompt = serde_json::from_str(&line).map_err(|e| Error::Fixture {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            experts.push(e);
        }
        Self::new(experts)
    }

    /// The `n` experts with the lowest ids.
    pub fn first(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.experts.len() {
            return Err(Error::config(format!(
                "requested {n} experts from a pool of {}",
                self.experts.len()
            )));
        }
        Ok(Self {
            experts: self.experts[..n].to_vec(),
        })
    }

    pub fn experts(&self) -> &[ExpertPrompt] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}
