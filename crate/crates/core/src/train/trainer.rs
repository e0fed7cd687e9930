//! Epoch loops for supervised and preference training.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{
    dpo_loss_and_grad_with_ref, reference_logprobs, sft_loss_and_grad, DpoOptions, PreferencePair,
    SftExample,
};
use super::optim::{adamw_step, lr_at, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::params::{Gradients, ParameterSet};

/// Final weights plus what the loop recorded on the way.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub steps: usize,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

struct Checkpointer<'a> {
    dir: Option<&'a Path>,
    every: usize,
    saved: Vec<PathBuf>,
}

impl<'a> Checkpointer<'a> {
    fn new(dir: Option<&'a Path>, every: usize) -> Result<Self> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self {
            dir,
            every,
            saved: Vec::new(),
        })
    }

    fn after_step(&mut self, step: usize, params: &ParameterSet) -> Result<()> {
        if self.every > 0 && step % self.every == 0 {
            self.save(&format!("step-{step:06}.ckpt"), params)?;
        }
        Ok(())
    }

    fn save(&mut self, name: &str, params: &ParameterSet) -> Result<()> {
        if let Some(d) = self.dir {
            let path = d.join(name);
            checkpoint::save(&path, params)?;
            self.saved.push(path);
        }
        Ok(())
    }

    fn last_good(&self) -> Option<PathBuf> {
        self.saved.last().cloned()
    }

    /// Attaches the step and last checkpoint to a divergence. A non-finite
    /// value caught inside the loss counts as one.
    fn fail(&self, step: usize, err: Error) -> Error {
        match err {
            Error::Training { message, .. } | Error::Numeric(message) => Error::Training {
                step,
                message,
                last_good: self.last_good(),
            },
            other => other,
        }
    }
}

/// Shuffled index batches for each epoch from one seeded stream.
struct Batches {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            batch,
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// Next batch of the epoch; wraps into a fresh shuffle at the end.
    fn next(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let s = self.pos;
        self.pos = end;
        &self.order[s..end]
    }
}

fn apply(
    params: &mut ParameterSet,
    loss: f32,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: format!("non-finite loss {loss}"),
            last_good: None,
        });
    }
    adamw_step(params, grads, state, lr, cfg)
}

/// Supervised training for `epochs × ⌈N / batch⌉` steps, with checkpoints
/// every `checkpoint_every` steps and a final one when `dir` is given.
pub fn train_sft(
    data: &[SftExample],
    init: ParameterSet,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("SFT dataset is empty".into()));
    }
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut ckpt = Checkpointer::new(dir, cfg.checkpoint_every)?;
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let total = cfg.epochs * batches.per_epoch();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let batch: Vec<SftExample> = batches.next().iter().map(|&i| data[i].clone()).collect();
        let lr = lr_at(step, total, cfg.learning_rate, cfg.schedule);
        let (loss, grads) = sft_loss_and_grad(&params, &batch).map_err(|e| ckpt.fail(step, e))?;
        apply(&mut params, loss, &grads, &mut state, lr, cfg).map_err(|e| ckpt.fail(step, e))?;
        losses.push(loss as f64);
        log::debug!("sft step {}/{total} loss {loss:.4} lr {lr:.2e}", step + 1);
        ckpt.after_step(step + 1, &params)?;
    }
    ckpt.save("final.ckpt", &params)?;
    Ok(TrainOutcome {
        params,
        steps: total,
        losses,
        checkpoints: ckpt.saved,
    })
}

/// Preference training against the frozen starting weights. With
/// `interleave_dpo_steps > 0`, every that many DPO steps are followed by
/// `interleave_sft_steps` supervised steps on `refresh`.
pub fn train_dpo(
    pairs: &[PreferencePair],
    sft_checkpoint: &ParameterSet,
    cfg: &TrainConfig,
    refresh: &[SftExample],
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Domain("preference dataset is empty".into()));
    }
    let interleave = cfg.interleave_dpo_steps > 0;
    if interleave && refresh.is_empty() {
        return Err(Error::Config(
            "interleaved SFT refresh needs supervised examples".into(),
        ));
    }
    for p in pairs {
        p.validate()?;
    }
    // the reference policy never changes, so its log-probs are computed once
    let reference = pairs
        .iter()
        .map(|p| reference_logprobs(sft_checkpoint, p))
        .collect::<Result<Vec<_>>>()?;
    let opts = DpoOptions {
        beta: cfg.dpo_beta,
        length_normalize: cfg.dpo_length_normalize,
    };

    let mut params = sft_checkpoint.clone();
    let mut state = OptimizerState::new(&params);
    let mut ckpt = Checkpointer::new(dir, cfg.checkpoint_every)?;
    let mut batches = Batches::new(pairs.len(), cfg.batch_size, cfg.seed);
    let mut refresh_batches = Batches::new(refresh.len(), cfg.batch_size, cfg.seed ^ 0x5f7);
    let total = cfg.epochs * batches.per_epoch();
    let mut losses = Vec::with_capacity(total);
    let mut opt_steps = 0usize;
    for step in 0..total {
        let idx = batches.next().to_vec();
        let batch: Vec<PreferencePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let refs: Vec<(f64, f64)> = idx.iter().map(|&i| reference[i]).collect();
        let lr = lr_at(step, total, cfg.learning_rate, cfg.schedule);
        let (loss, grads) = dpo_loss_and_grad_with_ref(&params, &batch, &refs, opts)
            .map_err(|e| ckpt.fail(opt_steps, e))?;
        apply(&mut params, loss, &grads, &mut state, lr, cfg)
            .map_err(|e| ckpt.fail(opt_steps, e))?;
        opt_steps += 1;
        losses.push(loss as f64);
        log::debug!("dpo step {}/{total} loss {loss:.4}", step + 1);

        if interleave && (step + 1) % cfg.interleave_dpo_steps == 0 && step + 1 < total {
            for _ in 0..cfg.interleave_sft_steps {
                let sft: Vec<SftExample> = refresh_batches
                    .next()
                    .iter()
                    .map(|&i| refresh[i].clone())
                    .collect();
                let (l, g) =
                    sft_loss_and_grad(&params, &sft).map_err(|e| ckpt.fail(opt_steps, e))?;
                apply(&mut params, l, &g, &mut state, lr, cfg)
                    .map_err(|e| ckpt.fail(opt_steps, e))?;
                opt_steps += 1;
            }
        }
        ckpt.after_step(step + 1, &params)?;
    }
    ckpt.save("final.ckpt", &params)?;
    Ok(TrainOutcome {
        params,
        steps: opt_steps,
        losses,
        checkpoints: ckpt.saved,
    })
}
