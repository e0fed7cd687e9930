//! Autoregressive decoding: greedy, sampled, and lossless lookahead.

mod greedy;
pub mod lookahead;
mod sample;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use greedy::greedy_decode;
pub use lookahead::{lookahead_decode, lookahead_decode_with_pool, NGramPool};
pub use sample::sample_decode;

use crate::error::{Error, Result};
use crate::model::engine::ForwardWeights;
use crate::tokenizer::{encode_prompt, truncate_to_budget, PromptInput, Vocabulary, EOS};

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Greedy,
    Sample {
        temperature: f64,
        top_k: usize,
        seed: u64,
    },
    /// Window width `w`, n-gram size `n`, verification branches `v`.
    Lookahead {
        w: usize,
        n: usize,
        v: usize,
    },
}

impl Strategy {
    pub const DEFAULT_LOOKAHEAD: Strategy = Strategy::Lookahead { w: 4, n: 6, v: 4 };
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::Sample {
                temperature,
                top_k,
                seed,
            } => write!(f, "sample(t={temperature},k={top_k},seed={seed})"),
            Strategy::Lookahead { w, n, v } => write!(f, "lookahead({w},{n},{v})"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `greedy`, `w,n,v` or `lookahead(w,n,v)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "greedy" {
            return Ok(Strategy::Greedy);
        }
        let inner = s
            .strip_prefix("lookahead(")
            .and_then(|r| r.strip_suffix(')'))
            .unwrap_or(s);
        let parts: Vec<usize> = inner
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("cannot parse decode strategy '{s}'")))?;
        match parts.as_slice() {
            &[w, n, v] => Ok(Strategy::Lookahead { w, n, v }),
            _ => Err(Error::Config(format!(
                "lookahead needs three values w,n,v, got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    /// Seeds the random initial lookahead window.
    pub seed: u64,
    /// Per-key n-gram pool capacity.
    pub pool_capacity: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 80,
            strategy: Strategy::Greedy,
            seed: 0,
            pool_capacity: 16,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn lookahead(max_new_tokens: usize, w: usize, n: usize, v: usize) -> Self {
        Self {
            max_new_tokens,
            strategy: Strategy::Lookahead { w, n, v },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Sample {
                temperature, top_k, ..
            } => {
                if !(temperature > 0.0 && temperature.is_finite()) || top_k == 0 {
                    Err(Error::Config(
                        "sampling needs temperature > 0 and top_k >= 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Strategy::Lookahead { w, n, .. } => {
                if w == 0 || n < 2 {
                    Err(Error::Config(format!(
                        "lookahead needs w >= 1 and n >= 2, got w={w} n={n}"
                    )))
                } else if self.pool_capacity == 0 {
                    Err(Error::Config("pool capacity must be positive".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-request decoding counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub forward_steps: usize,
    pub tokens_emitted: usize,
    /// `accepted_by_length[k]` counts steps that emitted `k` tokens.
    pub accepted_by_length: Vec<usize>,
    pub wall_time: Duration,
}

impl DecodeStats {
    pub(crate) fn record_step(&mut self, emitted: usize) {
        self.forward_steps += 1;
        self.tokens_emitted += emitted;
        if self.accepted_by_length.len() <= emitted {
            self.accepted_by_length.resize(emitted + 1, 0);
        }
        self.accepted_by_length[emitted] += 1;
    }

    pub fn merge(&mut self, other: &DecodeStats) {
        self.forward_steps += other.forward_steps;
        self.tokens_emitted += other.tokens_emitted;
        if self.accepted_by_length.len() < other.accepted_by_length.len() {
            self.accepted_by_length
                .resize(other.accepted_by_length.len(), 0);
        }
        for (a, b) in self
            .accepted_by_length
            .iter_mut()
            .zip(&other.accepted_by_length)
        {
            *a += b;
        }
        self.wall_time += other.wall_time;
    }
}

/// Tokens emitted per forward step.
pub fn acceptance_rate(stats: &DecodeStats) -> f64 {
    if stats.forward_steps == 0 {
        return 0.0;
    }
    stats.tokens_emitted as f64 / stats.forward_steps as f64
}

/// Generated tokens (prompt excluded), ending with EOS when the model
/// produced one.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
}

/// Runs the configured strategy.
pub fn decode<W: ForwardWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(weights, prompt, cfg),
        Strategy::Sample { .. } => sample_decode(weights, prompt, cfg),
        Strategy::Lookahead { .. } => lookahead_decode(weights, prompt, cfg),
    }
}

/// A decoded summary: text, its tokens and the decode counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    /// Summary tokens after the budget cut, without EOS.
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
}

/// Prompts the model with `input`, decodes, drops EOS and cuts the result
/// to `budget` tokens.
pub fn summarize<W: ForwardWeights + ?Sized>(
    weights: &W,
    vocab: &Vocabulary,
    input: &PromptInput,
    cfg: &DecodeConfig,
    budget: usize,
) -> Result<Summary> {
    let prompt = encode_prompt(vocab, input);
    let out = decode(weights, &prompt, cfg)?;
    let mut tokens = out.tokens;
    if let Some(i) = tokens.iter().position(|&t| t == EOS) {
        tokens.truncate(i);
    }
    let tokens = truncate_to_budget(&tokens, budget);
    Ok(Summary {
        text: vocab.decode(&tokens)?,
        tokens,
        stats: out.stats,
    })
}

pub(crate) fn check_prompt<W: ForwardWeights + ?Sized>(weights: &W, prompt: &[u32]) -> Result<()> {
    let max = weights.config().max_seq_len;
    if prompt.is_empty() {
        return Err(Error::Length("empty prompt".into()));
    }
    if prompt.len() + 1 > max {
        return Err(Error::Length(format!(
            "prompt of {} tokens leaves no room in a {max}-token context",
            prompt.len()
        )));
    }
    Ok(())
}

/// Appends `tok`; returns false once decoding must stop.
pub(crate) fn push_token(out: &mut Vec<u32>, tok: u32, max_new: usize) -> bool {
    out.push(tok);
    tok != EOS && out.len() < max_new
}
