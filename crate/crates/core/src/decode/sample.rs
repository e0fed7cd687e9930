use web_time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_prompt, push_token, DecodeConfig, DecodeOutput, DecodeStats, Strategy};
use crate::error::{Error, Result};
use crate::model::engine::{forward_block_rows, prefill, AttentionMask, ForwardWeights, LogitRows};

/// Draws from the `top_k` highest logits after temperature scaling. Ties in
/// the top-k cut keep the lower token id.
pub(crate) fn sample_token(
    logits: &[f32],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(top_k.min(logits.len()));
    let m = logits[idx[0]] as f64;
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((logits[i] as f64 - m) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in idx.iter().zip(&weights) {
        if u < w {
            return i as u32;
        }
        u -= w;
    }
    idx[idx.len() - 1] as u32
}

/// Seeded top-k / temperature sampling.
pub fn sample_decode<W: ForwardWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let Strategy::Sample {
        temperature,
        top_k,
        seed,
    } = cfg.strategy
    else {
        return Err(Error::Config(
            "sample_decode needs a sampling strategy".into(),
        ));
    };
    check_prompt(weights, prompt)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_seq = weights.config().max_seq_len;
    let mut stats = DecodeStats::default();
    let (last, mut cache) = prefill(weights, prompt)?;
    let mut tok = sample_token(&last, temperature, top_k, &mut rng);
    stats.record_step(1);
    let mut out = Vec::new();
    let mut going = push_token(&mut out, tok, cfg.max_new_tokens);
    while going && cache.len() < max_seq {
        let mask = AttentionMask::causal(cache.len(), 1);
        let step = forward_block_rows(weights, &cache, &[tok], &mask, LogitRows::All)?;
        cache.append_block_rows(&step.kv, &[0])?;
        tok = sample_token(step.logits.row(0), temperature, top_k, &mut rng);
        stats.record_step(1);
        going = push_token(&mut out, tok, cfg.max_new_tokens);
    }
    stats.wall_time = start.elapsed();
    Ok(DecodeOutput { tokens: out, stats })
}
