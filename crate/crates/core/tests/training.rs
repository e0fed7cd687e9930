mod common;

use qdsum::model::{ModelConfig, ParameterSet};
use qdsum::train::{
    dpo_loss_and_grad, dpo_loss_and_grad_with_ref, sequence_logprob, sft_loss_and_grad, DpoOptions,
    PreferencePair, SftExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturbed(config: ModelConfig, seed: u64, spread: f64) -> ParameterSet<f64> {
    let mut p = ParameterSet::<f32>::init(config, seed)
        .unwrap()
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in p.as_mut_slice() {
        *v += rng.random_range(-spread..spread);
    }
    p
}

/// Central-difference step for the strict every-coordinate check. The
/// truncation error of central differences is O(h²); at h = 1e-3 it is
/// already ~1e-8 absolute on this model, which exceeds 1e-4 relative on the
/// smallest gradient coordinates.
const STRICT_STEP: f64 = 1e-5;

fn tiny_config(tied: bool) -> ModelConfig {
    let mut c = ModelConfig::new(2, 2, 8, 13, 10);
    c.ffn_hidden = 16;
    c.tie_output_head = tied;
    c
}

#[test]
fn logprob_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..10 {
        let p = perturbed(tiny_config(seed % 2 == 0), seed, 0.3);
        let prompt: Vec<u32> = (0..rng.random_range(1..5))
            .map(|_| rng.random_range(0..13))
            .collect();
        let completion: Vec<u32> = (0..rng.random_range(1..5))
            .map(|_| rng.random_range(0..13))
            .collect();
        let a = sequence_logprob(&p, &prompt, &completion).unwrap();
        let b = common::naive_logprob(&p, &prompt, &completion);
        assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn sft_gradient_matches_finite_differences() {
    for tied in [true, false] {
        let p = perturbed(tiny_config(tied), 3, 0.3);
        assert!(p.len() <= 10_000);
        let batch = vec![
            SftExample {
                prompt_tokens: vec![1, 4, 2],
                target_tokens: vec![7, 3, 12],
            },
            SftExample {
                prompt_tokens: vec![5],
                target_tokens: vec![9, 9, 0, 6],
            },
        ];
        let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
        let (worst, i, a, n) =
            common::finite_difference_check(&p, g.as_slice(), STRICT_STEP, 1e-12, |q| {
                sft_loss_and_grad(q, &batch).unwrap().0
            });
        println!("sft tied={tied}: worst relative error {worst:.3e} at {i} ({a:.6e} vs {n:.6e})");
        assert!(worst < 1e-4);
    }
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    for tied in [true, false] {
        let p = perturbed(tiny_config(tied), 4, 0.3);
        let reference = perturbed(tiny_config(tied), 5, 0.3);
        let batch = vec![
            PreferencePair {
                prompt_tokens: vec![1, 2],
                y_plus: vec![3, 4, 5],
                y_minus: vec![6, 7],
            },
            PreferencePair {
                prompt_tokens: vec![8, 9, 10],
                y_plus: vec![11],
                y_minus: vec![12, 0],
            },
        ];
        let (_, g) = dpo_loss_and_grad(&p, &reference, &batch, 0.5).unwrap();
        let (worst, i, a, n) =
            common::finite_difference_check(&p, g.as_slice(), STRICT_STEP, 1e-12, |q| {
                dpo_loss_and_grad(q, &reference, &batch, 0.5).unwrap().0
            });
        println!("dpo tied={tied}: worst relative error {worst:.3e} at {i} ({a:.6e} vs {n:.6e})");
        assert!(worst < 1e-4);
    }
}

#[test]
fn length_normalized_dpo_gradient_matches_finite_differences() {
    let p = perturbed(tiny_config(true), 6, 0.3);
    let batch = vec![PreferencePair {
        prompt_tokens: vec![1, 2],
        y_plus: vec![3, 4, 5],
        y_minus: vec![6],
    }];
    let refs = vec![(-4.0, -2.5)];
    let opts = DpoOptions {
        beta: 0.7,
        length_normalize: true,
    };
    let (_, g) = dpo_loss_and_grad_with_ref(&p, &batch, &refs, opts).unwrap();
    let (worst, ..) = common::finite_difference_check(&p, g.as_slice(), STRICT_STEP, 1e-12, |q| {
        dpo_loss_and_grad_with_ref(q, &batch, &refs, opts)
            .unwrap()
            .0
    });
    assert!(worst < 1e-4, "{worst}");
}

fn sft_batch() -> Vec<SftExample> {
    vec![
        SftExample {
            prompt_tokens: vec![1, 4, 2],
            target_tokens: vec![7, 3, 12],
        },
        SftExample {
            prompt_tokens: vec![5],
            target_tokens: vec![9, 9, 0, 6],
        },
    ]
}

#[test]
fn coarse_step_check_with_magnitude_floor() {
    // h = 1e-3, relative error against max(|analytic|, |numeric|, 1e-3)
    let p = perturbed(tiny_config(true), 3, 0.3);
    let batch = sft_batch();
    let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
    let (worst, ..) = common::finite_difference_check(&p, g.as_slice(), 1e-3, 1e-3, |q| {
        sft_loss_and_grad(q, &batch).unwrap().0
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn finite_difference_discrepancy_shrinks_quadratically() {
    let p = perturbed(tiny_config(false), 3, 0.3);
    let batch = sft_batch();
    let (_, g) = sft_loss_and_grad(&p, &batch).unwrap();
    let max_abs = |h: f64| {
        let mut q = p.clone();
        let mut worst = 0f64;
        for i in (0..q.len()).step_by(7) {
            let orig = q.as_slice()[i];
            q.as_mut_slice()[i] = orig + h;
            let up = sft_loss_and_grad(&q, &batch).unwrap().0;
            q.as_mut_slice()[i] = orig - h;
            let down = sft_loss_and_grad(&q, &batch).unwrap().0;
            q.as_mut_slice()[i] = orig;
            worst = worst.max(((up - down) / (2.0 * h) - g.as_slice()[i]).abs());
        }
        worst
    };
    let coarse = max_abs(1e-3);
    let fine = max_abs(1e-4);
    // a wrong gradient would leave an h-independent gap
    assert!(fine < coarse / 50.0, "{coarse:e} -> {fine:e}");
}
