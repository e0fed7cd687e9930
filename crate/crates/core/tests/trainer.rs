use qdsum::decode::{greedy_decode, DecodeConfig};
use qdsum::model::{checkpoint, ModelConfig, ParameterSet};
use qdsum::train::{
    sequence_logprob, train_dpo, train_sft, PreferencePair, Schedule, SftExample, TrainConfig,
};
use qdsum::Error;

fn tiny() -> ParameterSet {
    let mut c = ModelConfig::new(2, 2, 32, 24, 24);
    c.ffn_hidden = 64;
    ParameterSet::init(c, 3).unwrap()
}

fn data() -> Vec<SftExample> {
    vec![
        SftExample {
            prompt_tokens: vec![1, 2],
            target_tokens: vec![10, 11, 12],
        },
        SftExample {
            prompt_tokens: vec![3, 4],
            target_tokens: vec![13, 14],
        },
        SftExample {
            prompt_tokens: vec![5],
            target_tokens: vec![15, 16, 17, 18],
        },
        SftExample {
            prompt_tokens: vec![6, 7, 8],
            target_tokens: vec![19],
        },
    ]
}

fn fast() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        epochs: 80,
        checkpoint_every: 0,
        weight_decay: 0.0,
        schedule: Schedule::Constant,
        ..TrainConfig::default()
    }
}

#[test]
fn sft_memorizes_a_tiny_dataset() {
    let out = train_sft(&data(), tiny(), &fast(), None).unwrap();
    assert_eq!(out.steps, 80 * 2);
    let first = out.losses[..4].iter().sum::<f64>();
    let last = out.losses[out.losses.len() - 4..].iter().sum::<f64>();
    assert!(last < first / 20.0, "{first} -> {last}");
    for ex in data() {
        let g = greedy_decode(&out.params, &ex.prompt_tokens, &DecodeConfig::greedy(ex.target_tokens.len()))
            .unwrap();
        assert_eq!(g.tokens, ex.target_tokens);
    }
}

#[test]
fn same_seed_same_weights() {
    let cfg = TrainConfig {
        epochs: 3,
        ..fast()
    };
    let a = train_sft(&data(), tiny(), &cfg, None).unwrap();
    let b = train_sft(&data(), tiny(), &cfg, None).unwrap();
    assert_eq!(a.params.as_slice(), b.params.as_slice());
    let c = train_sft(&data(), tiny(), &TrainConfig { seed: 9, ..cfg }, None).unwrap();
    assert_ne!(a.params.as_slice(), c.params.as_slice());
}

#[test]
fn checkpoint_cadence_and_final_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 3,
        checkpoint_every: 3,
        ..fast()
    };
    // 4 examples in batches of 3: 2 steps per epoch, 8 in total
    let out = train_sft(&data(), tiny(), &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.steps, 8);
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-000003.ckpt", "step-000006.ckpt", "final.ckpt"]);
    let back = checkpoint::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(back.as_slice(), out.params.as_slice());
}

#[test]
fn divergence_reports_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        epochs: 20,
        checkpoint_every: 1,
        ..fast()
    };
    match train_sft(&data(), tiny(), &cfg, Some(dir.path())) {
        Err(Error::Training {
            step, last_good, ..
        }) => {
            assert!(step >= 1);
            let p = last_good.expect("a checkpoint was written before the blow-up");
            assert!(p.exists());
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

fn pairs() -> Vec<PreferencePair> {
    vec![
        PreferencePair {
            prompt_tokens: vec![1, 2],
            y_plus: vec![10, 11],
            y_minus: vec![20, 21],
        },
        PreferencePair {
            prompt_tokens: vec![3, 4],
            y_plus: vec![13, 14],
            y_minus: vec![13, 22],
        },
        PreferencePair {
            prompt_tokens: vec![5],
            y_plus: vec![15],
            y_minus: vec![23],
        },
    ]
}

fn margin(p: &ParameterSet, pair: &PreferencePair) -> f64 {
    let lp = |y: &[u32]| sequence_logprob(p, &pair.prompt_tokens, y).unwrap() as f64;
    lp(&pair.y_plus) - lp(&pair.y_minus)
}

#[test]
fn dpo_widens_every_margin_and_starts_at_ln2() {
    let sft = tiny();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 20,
        dpo_beta: 0.5,
        ..fast()
    };
    let out = train_dpo(&pairs(), &sft, &cfg, &[], None).unwrap();
    assert!((out.losses[0] - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    for pair in pairs() {
        assert!(margin(&out.params, &pair) > margin(&sft, &pair) + 1.0);
    }
}

#[test]
fn interleaved_refresh_runs_extra_steps() {
    let sft = tiny();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        epochs: 2,
        interleave_dpo_steps: 2,
        interleave_sft_steps: 1,
        ..fast()
    };
    let out = train_dpo(&pairs(), &sft, &cfg, &data(), None).unwrap();
    // 6 DPO steps; a refresh after steps 2 and 4 but not after the last
    assert_eq!(out.losses.len(), 6);
    assert_eq!(out.steps, 8);
    assert!(matches!(
        train_dpo(&pairs(), &sft, &cfg, &[], None),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_dpo(&[], &sft, &fast(), &[], None),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        train_sft(&[], sft, &fast(), None),
        Err(Error::Domain(_))
    ));
}
