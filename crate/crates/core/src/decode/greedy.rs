use web_time::Instant;

use super::{check_prompt, push_token, DecodeConfig, DecodeOutput, DecodeStats};
use crate::error::Result;
use crate::kernels::argmax;
use crate::model::engine::{forward_block_rows, prefill, AttentionMask, ForwardWeights, LogitRows};

/// One token per forward step, always the argmax (lowest id on ties).
/// Stops at EOS, after `max_new_tokens`, or when the context is full.
pub fn greedy_decode<W: ForwardWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    check_prompt(weights, prompt)?;
    let start = Instant::now();
    let max_seq = weights.config().max_seq_len;
    let mut stats = DecodeStats::default();
    let (last, mut cache) = prefill(weights, prompt)?;
    let mut tok = argmax(&last) as u32;
    stats.record_step(1);
    let mut out = Vec::new();
    let mut going = push_token(&mut out, tok, cfg.max_new_tokens);
    while going && cache.len() < max_seq {
        let mask = AttentionMask::causal(cache.len(), 1);
        let step = forward_block_rows(weights, &cache, &[tok], &mask, LogitRows::All)?;
        cache.append_block_rows(&step.kv, &[0])?;
        tok = argmax(step.logits.row(0)) as u32;
        stats.record_step(1);
        going = push_token(&mut out, tok, cfg.max_new_tokens);
    }
    stats.wall_time = start.elapsed();
    Ok(DecodeOutput { tokens: out, stats })
}
