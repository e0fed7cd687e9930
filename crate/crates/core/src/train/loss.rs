//! Supervised and preference losses with their gradients.

use serde::{Deserialize, Serialize};

use super::backprop::completion_logprob;
use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::params::{Gradients, ParameterSet};

/// Encoded prompt and EOS-terminated target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
}

/// Encoded prompt with a preferred and a dispreferred completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_tokens: Vec<u32>,
    pub y_plus: Vec<u32>,
    pub y_minus: Vec<u32>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.y_plus.is_empty() || self.y_minus.is_empty() {
            return Err(Error::Domain(
                "preference completions must be non-empty".into(),
            ));
        }
        if self.y_plus == self.y_minus {
            return Err(Error::Domain(
                "preferred and dispreferred completions are identical".into(),
            ));
        }
        Ok(())
    }
}

/// `Σ log p(completion_i | prompt, completion_<i)` over completion tokens only.
pub fn sequence_logprob<F: Scalar>(
    params: &ParameterSet<F>,
    prompt: &[u32],
    completion: &[u32],
) -> Result<F> {
    completion_logprob(params, prompt, completion, None)
}

/// Batch mean of the per-example summed target NLL, and its gradient.
pub fn sft_loss_and_grad<F: Scalar>(
    params: &ParameterSet<F>,
    batch: &[SftExample],
) -> Result<(F, Gradients<F>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty SFT batch".into()));
    }
    let mut grads = params.zeros_like();
    let b = F::of_f64(batch.len() as f64);
    let upstream = -F::one() / b;
    let mut loss = F::zero();
    for (i, ex) in batch.iter().enumerate() {
        if ex.target_tokens.is_empty() {
            return Err(Error::Domain(format!(
                "SFT example {i} has an empty target"
            )));
        }
        let lp = completion_logprob(
            params,
            &ex.prompt_tokens,
            &ex.target_tokens,
            Some((upstream, &mut grads)),
        )
        .map_err(|e| match e {
            Error::Length(m) => Error::Length(format!("SFT example {i}: {m}")),
            other => other,
        })?;
        loss -= lp;
    }
    Ok((loss / b, grads))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reference-policy log-probabilities of one pair, `(y⁺, y⁻)`.
pub fn reference_logprobs<F: Scalar>(
    reference: &ParameterSet<F>,
    pair: &PreferencePair,
) -> Result<(f64, f64)> {
    Ok((
        sequence_logprob(reference, &pair.prompt_tokens, &pair.y_plus)?.as_f64(),
        sequence_logprob(reference, &pair.prompt_tokens, &pair.y_minus)?.as_f64(),
    ))
}

/// Options of the preference loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoOptions {
    pub beta: f64,
    /// Divide each log-probability by its completion length.
    pub length_normalize: bool,
}

impl DpoOptions {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            length_normalize: false,
        }
    }
}

/// DPO loss `mean_i softplus(-z_i)` with
/// `z = β[(logπ(y⁺) − logπ(y⁻)) − (logπ₀(y⁺) − logπ₀(y⁻))]`, using
/// precomputed reference log-probabilities.
pub fn dpo_loss_and_grad_with_ref<F: Scalar>(
    params: &ParameterSet<F>,
    batch: &[PreferencePair],
    reference: &[(f64, f64)],
    opts: DpoOptions,
) -> Result<(F, Gradients<F>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty preference batch".into()));
    }
    if reference.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} reference log-prob pairs for {} preference pairs",
            reference.len(),
            batch.len()
        )));
    }
    if !(opts.beta >= 0.0 && opts.beta.is_finite()) {
        return Err(Error::Config(format!(
            "DPO beta must be finite and non-negative, got {}",
            opts.beta
        )));
    }
    let mut grads = params.zeros_like();
    let b = batch.len() as f64;
    let mut loss = 0f64;
    for (pair, &(r_plus, r_minus)) in batch.iter().zip(reference) {
        pair.validate()?;
        let norm = |n: usize| if opts.length_normalize { n as f64 } else { 1.0 };
        let (n_plus, n_minus) = (norm(pair.y_plus.len()), norm(pair.y_minus.len()));
        let lp_plus = sequence_logprob(params, &pair.prompt_tokens, &pair.y_plus)?.as_f64();
        let lp_minus = sequence_logprob(params, &pair.prompt_tokens, &pair.y_minus)?.as_f64();
        let z = opts.beta
            * ((lp_plus / n_plus - lp_minus / n_minus) - (r_plus / n_plus - r_minus / n_minus));
        loss += softplus(-z);
        // dL/dz = σ(z) − 1
        let dz = (sigmoid(z) - 1.0) * opts.beta / b;
        if dz != 0.0 {
            completion_logprob(
                params,
                &pair.prompt_tokens,
                &pair.y_plus,
                Some((F::of_f64(dz / n_plus), &mut grads)),
            )?;
            completion_logprob(
                params,
                &pair.prompt_tokens,
                &pair.y_minus,
                Some((F::of_f64(-dz / n_minus), &mut grads)),
            )?;
        }
    }
    Ok((F::of_f64(loss / b), grads))
}

/// DPO loss against a frozen reference model.
pub fn dpo_loss_and_grad<F: Scalar>(
    params: &ParameterSet<F>,
    reference: &ParameterSet<F>,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(F, Gradients<F>)> {
    let refs = batch
        .iter()
        .map(|p| reference_logprobs(reference, p))
        .collect::<Result<Vec<_>>>()?;
    dpo_loss_and_grad_with_ref(params, batch, &refs, DpoOptions::new(beta))
}
