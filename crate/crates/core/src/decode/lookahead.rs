//! Lookahead decoding: Jacobi-style window guesses feed an n-gram pool,
//! and pooled continuations of the last confirmed token are verified
//! against greedy argmaxes in the same forward pass.
//!
//! Block layout of every step (`L` = cache length):
//!
//! ```text
//! row 0                  last confirmed token, position L
//! window  (ℓ, j)         level ℓ < n-1, column j < w, position L+1+j+ℓ
//! branch  (b, i)         candidate b, token i < n-1, position L+1+i
//! ```
//!
//! Window token `(0, j)` sees row 0 and `(0, 0..j)`; token `(ℓ, j)` for
//! `ℓ ≥ 1` sees row 0, `(0, 0..=j)` and `(1..ℓ, j)`. A branch token sees
//! row 0 and the earlier tokens of its own branch. Row 0 and every branch
//! row therefore compute exactly what sequential greedy steps would, and
//! the output is identical to [`greedy_decode`](super::greedy_decode).

use std::collections::{HashMap, VecDeque};
use web_time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_prompt, push_token, DecodeConfig, DecodeOutput, DecodeStats, Strategy};
use crate::error::{Error, Result};
use crate::kernels::argmax;
use crate::model::engine::{forward_block_rows, prefill, AttentionMask, ForwardWeights, LogitRows};

/// Continuations of length `n - 1` keyed by the token preceding them.
#[derive(Debug, Clone)]
pub struct NGramPool {
    map: HashMap<u32, VecDeque<Vec<u32>>>,
    continuation_len: usize,
    capacity: usize,
    size: usize,
}

impl NGramPool {
    pub fn new(continuation_len: usize, capacity: usize) -> Self {
        Self {
            map: HashMap::new(),
            continuation_len,
            capacity,
            size: 0,
        }
    }

    pub fn continuation_len(&self) -> usize {
        self.continuation_len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total stored continuations.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn distinct_keys(&self) -> usize {
        self.map.len()
    }

    /// Stores a continuation as the most recent entry for `key`. A
    /// duplicate is moved to the front instead of stored twice; the oldest
    /// entry is evicted beyond capacity.
    pub fn insert(&mut self, key: u32, continuation: &[u32]) {
        assert_eq!(
            continuation.len(),
            self.continuation_len,
            "n-gram continuation length"
        );
        let list = self.map.entry(key).or_default();
        if let Some(pos) = list.iter().position(|c| c == continuation) {
            let c = list.remove(pos).expect("position is valid");
            list.push_back(c);
            return;
        }
        list.push_back(continuation.to_vec());
        self.size += 1;
        if list.len() > self.capacity {
            list.pop_front();
            self.size -= 1;
        }
    }

    /// Up to `v` continuations for `key`, most recently inserted first.
    pub fn candidates(&self, key: u32, v: usize) -> Vec<&[u32]> {
        self.map
            .get(&key)
            .map(|l| l.iter().rev().take(v).map(|c| c.as_slice()).collect())
            .unwrap_or_default()
    }
}

/// Lookahead decoding with a fresh per-request pool.
pub fn lookahead_decode<W: ForwardWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let Strategy::Lookahead { n, .. } = cfg.strategy else {
        return Err(Error::Config(
            "lookahead_decode needs a lookahead strategy".into(),
        ));
    };
    let mut pool = NGramPool::new(n.max(2) - 1, cfg.pool_capacity);
    lookahead_decode_with_pool(weights, prompt, cfg, &mut pool)
}

struct Layout {
    w: usize,
    levels: usize,
}

impl Layout {
    fn window_row(&self, level: usize, col: usize) -> usize {
        1 + level * self.w + col
    }

    fn branch_row(&self, b: usize, i: usize) -> usize {
        1 + self.levels * self.w + b * self.levels + i
    }
}

/// Lookahead decoding that reads and extends a caller-owned pool, letting
/// n-grams carry over between requests.
pub fn lookahead_decode_with_pool<W: ForwardWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    cfg: &DecodeConfig,
    pool: &mut NGramPool,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let Strategy::Lookahead { w, n, v } = cfg.strategy else {
        return Err(Error::Config(
            "lookahead_decode needs a lookahead strategy".into(),
        ));
    };
    if pool.continuation_len() != n - 1 {
        return Err(Error::Config(format!(
            "pool holds {}-token continuations, strategy needs {}",
            pool.continuation_len(),
            n - 1
        )));
    }
    check_prompt(weights, prompt)?;
    let start = Instant::now();
    let c = *weights.config();
    let levels = n - 1;
    let lay = Layout { w, levels };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut window: Vec<Vec<u32>> = (0..levels)
        .map(|_| {
            (0..w)
                .map(|_| rng.random_range(0..c.vocab_size as u32))
                .collect()
        })
        .collect();

    let mut stats = DecodeStats::default();
    let (last, mut cache) = prefill(weights, prompt)?;
    let mut slot0 = argmax(&last) as u32;
    stats.record_step(1);
    let mut out = Vec::new();
    let mut going = push_token(&mut out, slot0, cfg.max_new_tokens);

    let window_rows = w * levels;
    let top_rows: Vec<usize> = (0..w).map(|j| lay.window_row(levels - 1, j)).collect();
    while going && cache.len() < c.max_seq_len {
        let branches: Vec<Vec<u32>> = pool
            .candidates(slot0, v)
            .into_iter()
            .map(|b| b.to_vec())
            .collect();
        let block_len = 1 + window_rows + branches.len() * levels;
        let l_cache = cache.len();

        if l_cache + block_len > c.max_seq_len {
            // not enough context left for speculation: plain greedy step
            let mask = AttentionMask::causal(l_cache, 1);
            let step = forward_block_rows(weights, &cache, &[slot0], &mask, LogitRows::All)?;
            cache.append_block_rows(&step.kv, &[0])?;
            slot0 = argmax(step.logits.row(0)) as u32;
            stats.record_step(1);
            going = push_token(&mut out, slot0, cfg.max_new_tokens);
            continue;
        }

        let mut block = Vec::with_capacity(block_len);
        let mut parents: Vec<Vec<usize>> = Vec::with_capacity(block_len);
        block.push(slot0);
        parents.push(Vec::new());
        for (level, row) in window.iter().enumerate() {
            for (j, &tok) in row.iter().enumerate() {
                let mut p = vec![0];
                let first_level_cols = if level == 0 { j } else { j + 1 };
                p.extend((0..first_level_cols).map(|jj| lay.window_row(0, jj)));
                p.extend((1..level).map(|ll| lay.window_row(ll, j)));
                block.push(tok);
                parents.push(p);
            }
        }
        for (b, branch) in branches.iter().enumerate() {
            for (i, &tok) in branch.iter().enumerate() {
                let mut p = vec![0];
                p.extend((0..i).map(|ii| lay.branch_row(b, ii)));
                block.push(tok);
                parents.push(p);
            }
        }
        let mask = AttentionMask::from_parents(l_cache, &parents)?;

        let mut logit_rows = Vec::with_capacity(1 + w + branches.len() * levels);
        logit_rows.push(0);
        logit_rows.extend_from_slice(&top_rows);
        for b in 0..branches.len() {
            logit_rows.extend((0..levels).map(|i| lay.branch_row(b, i)));
        }
        let step =
            forward_block_rows(weights, &cache, &block, &mask, LogitRows::Only(&logit_rows))?;
        let logits = &step.logits;
        let branch_logit = |b: usize, i: usize| logits.row(1 + w + b * levels + i);

        // verification: longest branch prefix agreeing with successive argmaxes
        let first = argmax(logits.row(0)) as u32;
        let mut best: (usize, usize, Vec<u32>) = (0, usize::MAX, vec![first]);
        for (b, branch) in branches.iter().enumerate() {
            let mut preds = vec![first];
            let mut m = 0;
            while m < levels && branch[m] == preds[m] {
                preds.push(argmax(branch_logit(b, m)) as u32);
                m += 1;
            }
            if m > best.0 {
                best = (m, b, preds);
            }
        }
        let (matched, best_branch, emitted) = best;

        // window update and n-gram harvest
        let new_top: Vec<u32> = (0..w).map(|j| argmax(logits.row(1 + j)) as u32).collect();
        for j in 0..w {
            let mut gram: Vec<u32> = (1..levels).map(|l| window[l][j]).collect();
            gram.push(new_top[j]);
            pool.insert(window[0][j], &gram);
        }
        window.remove(0);
        window.push(new_top);

        stats.record_step(emitted.len());
        for &t in &emitted {
            going = push_token(&mut out, t, cfg.max_new_tokens);
            if !going {
                break;
            }
        }
        if !going {
            break;
        }
        let mut commit = vec![0usize];
        if matched > 0 {
            commit.extend((0..matched).map(|i| lay.branch_row(best_branch, i)));
        }
        cache.append_block_rows(&step.kv, &commit)?;
        slot0 = *emitted.last().expect("at least one token per step");
    }
    // tokens emitted past a stop condition were counted but not kept
    stats.tokens_emitted = out.len();
    stats.wall_time = start.elapsed();
    Ok(DecodeOutput { tokens: out, stats })
}
