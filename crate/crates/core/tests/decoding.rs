mod common;

use proptest::prelude::*;
use qdsum::decode::{
    acceptance_rate, decode, greedy_decode, lookahead_decode, lookahead_decode_with_pool,
    sample_decode, DecodeConfig, NGramPool, Strategy,
};
use qdsum::kernels::argmax;
use qdsum::model::{prefill, ModelConfig, ParameterSet};
use qdsum::quant::{KvScaling, Model, QuantMode};
use qdsum::synthetic::periodic_model;
use qdsum::tokenizer::EOS;
use qdsum::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(vocab: usize, seq: usize) -> ModelConfig {
    let mut c = ModelConfig::new(2, 2, 16, vocab, seq);
    c.ffn_hidden = 32;
    c
}

/// Random model with weights large enough that argmaxes are decisive and
/// continuations repeat, so lookahead branches actually get accepted.
fn spiky_model(vocab: usize, seq: usize, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::init(small_config(vocab, seq), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in p.as_mut_slice() {
        *v += rng.random_range(-0.8..0.8);
    }
    p
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    let len = rng.random_range(1..8);
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

#[test]
fn greedy_matches_naive_recompute() {
    for seed in 0..4 {
        let p = spiky_model(23, 40, seed);
        let prompt = [3u32, 9, 1];
        let out = greedy_decode(&p, &prompt, &DecodeConfig::greedy(20)).unwrap();
        let p64 = p.cast::<f64>();
        let mut ctx = prompt.to_vec();
        let mut naive = Vec::new();
        for _ in 0..20 {
            let rows = common::naive_logits(&p64, &ctx);
            let last = rows.last().unwrap();
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            naive.push(best as u32);
            ctx.push(best as u32);
        }
        assert_eq!(out.tokens, naive, "seed {seed}");
        assert_eq!(acceptance_rate(&out.stats), 1.0);
        assert_eq!(out.stats.forward_steps, 20);
    }
}

#[test]
fn always_eos_model_stops_after_one_step() {
    let mut c = small_config(EOS as usize + 2, 16);
    c.tie_output_head = false;
    let mut p = ParameterSet::zeros(c).unwrap();
    let head = p.layout().head.clone().unwrap();
    let lnf_bias = p.layout().lnf_bias.clone();
    // constant final features times a head column that favours EOS
    p.get_mut(&lnf_bias).fill(1.0);
    let v = c.vocab_size;
    for row in 0..c.hidden_size {
        p.get_mut(&head)[row * v + EOS as usize] = 1.0;
    }
    for cfg in [
        DecodeConfig::greedy(10),
        DecodeConfig::lookahead(10, 4, 6, 4),
    ] {
        let out = decode(&p, &[1, 2], &cfg).unwrap();
        assert_eq!(out.tokens, vec![EOS]);
        assert_eq!(out.stats.forward_steps, 1);
    }
}

#[test]
fn ties_break_to_lowest_id() {
    let p = ParameterSet::zeros(small_config(11, 16)).unwrap();
    let out = greedy_decode(&p, &[5], &DecodeConfig::greedy(4)).unwrap();
    assert_eq!(out.tokens, vec![0, 0, 0, 0]);
    let la = lookahead_decode(&p, &[5], &DecodeConfig::lookahead(4, 4, 6, 4)).unwrap();
    assert_eq!(la.tokens, out.tokens);
}

#[test]
fn deterministic_decoding() {
    let p = spiky_model(17, 48, 9);
    for cfg in [
        DecodeConfig::greedy(15),
        DecodeConfig::lookahead(15, 4, 6, 4),
        DecodeConfig {
            strategy: Strategy::Sample {
                temperature: 0.8,
                top_k: 5,
                seed: 3,
            },
            ..DecodeConfig::greedy(15)
        },
    ] {
        let a = decode(&p, &[1, 2, 3], &cfg).unwrap();
        let b = decode(&p, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}

#[test]
fn top_k_one_is_greedy() {
    let p = spiky_model(19, 48, 4);
    let greedy = greedy_decode(&p, &[2, 4], &DecodeConfig::greedy(25)).unwrap();
    for temperature in [0.05, 1.0, 7.0] {
        let cfg = DecodeConfig {
            strategy: Strategy::Sample {
                temperature,
                top_k: 1,
                seed: 11,
            },
            ..DecodeConfig::greedy(25)
        };
        assert_eq!(
            sample_decode(&p, &[2, 4], &cfg).unwrap().tokens,
            greedy.tokens
        );
    }
}

#[test]
fn cold_sampling_mode_is_argmax() {
    let p = ParameterSet::init(small_config(13, 16), 5).unwrap();
    let prompt = [1u32, 2];
    let (last, _) = prefill(&p, &prompt).unwrap();
    let best = argmax(&last) as u32;
    let mut counts = vec![0usize; 13];
    for seed in 0..1000 {
        let cfg = DecodeConfig {
            strategy: Strategy::Sample {
                temperature: 0.01,
                top_k: 13,
                seed,
            },
            ..DecodeConfig::greedy(1)
        };
        counts[sample_decode(&p, &prompt, &cfg).unwrap().tokens[0] as usize] += 1;
    }
    let mode = (0..13)
        .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
        .unwrap();
    assert_eq!(mode as u32, best);
}

#[test]
fn lossless_on_random_models_all_modes() {
    let configs = [
        (4, 6, 4),
        (5, 5, 5),
        (6, 6, 6),
        (1, 2, 1),
        (3, 3, 0),
        (2, 7, 8),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut accepted_multi = 0usize;
    for case in 0..12u64 {
        let vocab = [7, 12, 31][case as usize % 3];
        let p = spiky_model(vocab, 64, case);
        let prompt = random_prompt(&mut rng, vocab);
        for mode in [
            QuantMode::F32,
            QuantMode::Int8WeightOnly,
            QuantMode::Fp8W8A8Kv,
            QuantMode::Bf16Sim,
        ] {
            let m = Model::from(p.clone())
                .to_mode(mode, KvScaling::PerToken)
                .unwrap();
            let greedy = greedy_decode(&m, &prompt, &DecodeConfig::greedy(40)).unwrap();
            for &(w, n, v) in &configs {
                let mut cfg = DecodeConfig::lookahead(40, w, n, v);
                cfg.seed = case;
                let la = lookahead_decode(&m, &prompt, &cfg).unwrap();
                assert_eq!(
                    la.tokens, greedy.tokens,
                    "case {case} mode {mode} cfg ({w},{n},{v})"
                );
                assert_eq!(la.stats.tokens_emitted, la.tokens.len());
                assert!(acceptance_rate(&la.stats) >= 1.0);
                accepted_multi += la.stats.accepted_by_length.iter().skip(2).sum::<usize>();
            }
        }
    }
    // the comparison is only meaningful if speculation was actually accepted
    assert!(
        accepted_multi > 50,
        "only {accepted_multi} multi-token steps"
    );
}

#[test]
fn speculation_disabled_gives_ar_one() {
    let p = spiky_model(12, 64, 3);
    let greedy = greedy_decode(&p, &[1, 5], &DecodeConfig::greedy(30)).unwrap();
    let la = lookahead_decode(&p, &[1, 5], &DecodeConfig::lookahead(30, 1, 4, 0)).unwrap();
    assert_eq!(la.tokens, greedy.tokens);
    assert_eq!(acceptance_rate(&la.stats), 1.0);
    assert_eq!(la.stats.forward_steps, greedy.stats.forward_steps);
}

#[test]
fn periodic_model_accelerates() {
    let mut c = ModelConfig::new(2, 4, 32, 64, 256);
    c.ffn_hidden = 64;
    let m = periodic_model(c, &[10, 20, 30, 40], 2).unwrap();
    let prompt = [1u32, 2, 3];
    let greedy = greedy_decode(&m, &prompt, &DecodeConfig::greedy(200)).unwrap();
    let la = lookahead_decode(&m, &prompt, &DecodeConfig::lookahead(200, 4, 6, 4)).unwrap();
    assert_eq!(la.tokens, greedy.tokens);
    assert_eq!(greedy.stats.forward_steps, 200);
    assert!(la.stats.forward_steps < greedy.stats.forward_steps);
    assert!(
        acceptance_rate(&la.stats) > 1.5,
        "AR {}",
        acceptance_rate(&la.stats)
    );
}

#[test]
fn eos_inside_accepted_span_truncates() {
    // cycle through EOS: the first EOS ends the output even mid-branch
    let mut c = ModelConfig::new(1, 2, 16, EOS as usize + 1, 128);
    c.ffn_hidden = 32;
    let m = periodic_model(c, &[10, 20, 30, EOS], 1).unwrap();
    let greedy = greedy_decode(&m, &[30], &DecodeConfig::greedy(50)).unwrap();
    assert_eq!(greedy.tokens, vec![EOS]);
    let greedy = greedy_decode(&m, &[5], &DecodeConfig::greedy(50)).unwrap();
    assert_eq!(greedy.tokens, vec![10, 20, 30, EOS]);
    let mut pool = NGramPool::new(5, 16);
    // seed the pool with the true continuation so the whole span is verified at once
    pool.insert(10, &[20, 30, EOS, 10, 20]);
    let la = lookahead_decode_with_pool(&m, &[5], &DecodeConfig::lookahead(50, 4, 6, 4), &mut pool)
        .unwrap();
    assert_eq!(la.tokens, greedy.tokens);
    assert_eq!(la.stats.forward_steps, 2);
    assert_eq!(la.stats.tokens_emitted, 4);
}

#[test]
fn degrades_to_greedy_near_context_end() {
    let mut c = ModelConfig::new(2, 4, 32, 64, 64);
    c.ffn_hidden = 64;
    let m = periodic_model(c, &[10, 20, 30, 40], 2).unwrap();
    let prompt = [1u32; 20];
    let greedy = greedy_decode(&m, &prompt, &DecodeConfig::greedy(100)).unwrap();
    // the last token is predicted from the final context row and never cached
    assert_eq!(greedy.tokens.len(), 64 - 20 + 1);
    for (w, n, v) in [(4, 6, 4), (6, 6, 6)] {
        let la = lookahead_decode(&m, &prompt, &DecodeConfig::lookahead(100, w, n, v)).unwrap();
        assert_eq!(la.tokens, greedy.tokens);
    }
}

#[test]
fn length_errors() {
    let p = ParameterSet::init(small_config(11, 8), 1).unwrap();
    for cfg in [DecodeConfig::greedy(5), DecodeConfig::lookahead(5, 4, 6, 4)] {
        assert!(matches!(decode(&p, &[], &cfg), Err(Error::Length(_))));
        assert!(matches!(decode(&p, &[1; 8], &cfg), Err(Error::Length(_))));
        assert!(decode(&p, &[1; 7], &cfg).is_ok());
    }
    let mut pool = NGramPool::new(3, 16);
    assert!(matches!(
        lookahead_decode_with_pool(&p, &[1], &DecodeConfig::lookahead(5, 4, 6, 4), &mut pool),
        Err(Error::Config(_))
    ));
}

#[test]
fn shared_pool_carries_over() {
    let mut c = ModelConfig::new(2, 4, 32, 64, 256);
    c.ffn_hidden = 64;
    let m = periodic_model(c, &[10, 20, 30, 40], 2).unwrap();
    let cfg = DecodeConfig::lookahead(60, 4, 6, 4);
    let mut pool = NGramPool::new(5, 16);
    let cold = lookahead_decode_with_pool(&m, &[1, 2], &cfg, &mut pool).unwrap();
    let warm = lookahead_decode_with_pool(&m, &[1, 2], &cfg, &mut pool).unwrap();
    assert_eq!(cold.tokens, warm.tokens);
    assert!(warm.stats.forward_steps < cold.stats.forward_steps);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pool_bounds(ops in proptest::collection::vec((0u32..6, proptest::collection::vec(0u32..4, 3)), 0..300),
                   capacity in 1usize..6) {
        let mut pool = NGramPool::new(3, capacity);
        let mut keys = std::collections::HashSet::new();
        for (k, cont) in &ops {
            pool.insert(*k, cont);
            keys.insert(*k);
            prop_assert!(pool.len() <= keys.len() * capacity);
            let cands = pool.candidates(*k, usize::MAX);
            prop_assert!(cands.len() <= capacity);
            prop_assert_eq!(cands[0], cont.as_slice());
            prop_assert!(cands.iter().all(|c| c.len() == 3));
        }
        let total: usize = keys.iter().map(|&k| pool.candidates(k, usize::MAX).len()).sum();
        prop_assert_eq!(total, pool.len());
    }
}

#[test]
fn pool_fifo_eviction_and_recency() {
    let mut pool = NGramPool::new(2, 2);
    pool.insert(1, &[1, 1]);
    pool.insert(1, &[2, 2]);
    pool.insert(1, &[1, 1]);
    assert_eq!(pool.candidates(1, 4), vec![&[1u32, 1][..], &[2, 2][..]]);
    pool.insert(1, &[3, 3]);
    assert_eq!(pool.candidates(1, 4), vec![&[3u32, 3][..], &[1, 1][..]]);
    assert_eq!(pool.candidates(1, 1).len(), 1);
    assert!(pool.candidates(9, 4).is_empty());
    assert_eq!(pool.len(), 2);
}
