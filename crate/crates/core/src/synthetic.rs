//! Handcrafted models and generated corpora for tests, benchmarks and the
//! desk-scale pipeline.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ParameterSet};
use crate::tokenizer::PromptInput;

/// Sentence terminator of the extractive task.
pub const SENTENCE_END: char = '。';

/// First code point of the characters the extractive task is written in.
const FIRST_CHAR: u32 = 0x4E00;

/// Shape of the generated extractive corpus.
///
/// Sentences come from a fixed bank: each of `queries` leading characters
/// has `variants` sentences that share it and differ in their
/// `body_chars`-long bodies. No body character is used twice in the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    pub queries: usize,
    pub variants: usize,
    pub body_chars: usize,
    pub sentences_per_doc: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            queries: 10,
            variants: 2,
            body_chars: 6,
            sentences_per_doc: 3,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0
            || self.variants == 0
            || self.body_chars == 0
            || self.sentences_per_doc == 0
            || self.sentences_per_doc > self.queries
        {
            return Err(Error::Config(
                "task needs non-zero sizes and at most one sentence per query character".into(),
            ));
        }
        Ok(())
    }

    /// Bank sentence `variant` of query character `query`. Character
    /// positions do not depend on `self.variants`, so a config with fewer
    /// variants sees a prefix of the same bank.
    pub fn sentence(&self, query: usize, variant: usize) -> String {
        let ch = |i: usize| char::from_u32(FIRST_CHAR + i as u32).expect("CJK code point");
        let mut s = String::with_capacity(4 * (self.body_chars + 2));
        s.push(ch(query));
        let base = 1024 + (variant * 1024 + query) * self.body_chars;
        for k in 0..self.body_chars {
            s.push(ch(base + k));
        }
        s.push(SENTENCE_END);
        s
    }
}

/// One document with a one-character query; the gold summary is the
/// sentence that starts with the query character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub input: PromptInput,
    pub gold: String,
    pub sentences: Vec<String>,
    pub target: usize,
}

/// `n` examples from a seeded stream. Documents draw distinct query
/// characters, so every query picks exactly one sentence, and the variant
/// of each sentence is drawn independently.
pub fn generate_task(n: usize, cfg: &TaskConfig, seed: u64) -> Result<Vec<TaskExample>> {
    cfg.validate()?;
    if cfg.queries > 1024 {
        return Err(Error::Config("at most 1024 query characters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..cfg.queries).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let picked: Vec<usize> = all
            .choose_multiple(&mut rng, cfg.sentences_per_doc)
            .copied()
            .collect();
        let sentences: Vec<String> = picked
            .iter()
            .map(|&q| cfg.sentence(q, rng.random_range(0..cfg.variants)))
            .collect();
        let target = rng.random_range(0..sentences.len());
        let query = sentences[target]
            .chars()
            .next()
            .expect("non-empty sentence")
            .to_string();
        out.push(TaskExample {
            input: PromptInput {
                query,
                title: String::new(),
                content: sentences.concat(),
            },
            gold: sentences[target].clone(),
            sentences,
            target,
        });
    }
    Ok(out)
}

/// Shuffles a copy with a seeded RNG.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// A model whose greedy continuation cycles through `cycle` forever.
///
/// Cycle token `i` writes a large value into hidden unit `i`, and the
/// untied head maps unit `i` to the following cycle token. Every other
/// token lights unit `cycle.len()`, which points at `cycle[0]`. The layer
/// weights keep a small random init so the blocks still do real work.
pub fn periodic_model(mut config: ModelConfig, cycle: &[u32], seed: u64) -> Result<ParameterSet> {
    let p = cycle.len();
    if p < 2 || config.hidden_size <= p {
        return Err(Error::Config(format!(
            "periodic model needs a cycle of at least 2 tokens and hidden_size > cycle length, got {p} and {}",
            config.hidden_size
        )));
    }
    if cycle.iter().any(|&t| t as usize >= config.vocab_size) {
        return Err(Error::Config("cycle token outside the vocabulary".into()));
    }
    config.tie_output_head = false;
    let mut params = ParameterSet::init(config, seed)?;
    let d = config.hidden_size;
    let v = config.vocab_size;
    let layout = params.layout().clone();
    let data = params.as_mut_slice();

    let emb = &mut data[layout.tok_emb.clone()];
    emb.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for tok in 0..v {
        let row = &mut emb[tok * d..(tok + 1) * d];
        for x in row.iter_mut() {
            *x = rng.random_range(-0.05..0.05);
        }
        let unit = cycle.iter().position(|&c| c as usize == tok).unwrap_or(p);
        row[unit] = 10.0;
    }
    data[layout.pos_emb.clone()].fill(0.0);

    let head = layout.head.clone().expect("untied head");
    let head = &mut data[head];
    head.fill(0.0);
    for (i, _) in cycle.iter().enumerate() {
        let next = cycle[(i + 1) % p] as usize;
        head[i * v + next] = 4.0;
    }
    head[p * v + cycle[0] as usize] = 4.0;
    Ok(params)
}
