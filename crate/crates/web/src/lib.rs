//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations, each returning plain numbers or a JSON string so the
//! page needs no glue beyond the generated module:
//! rounding curves for the low-precision formats, a lookahead-versus-greedy
//! run on a periodic model, and a ROUGE calculator.

use qdsum::decode::{acceptance_rate, decode, DecodeConfig};
use qdsum::eval::score_text;
use qdsum::model::ModelConfig;
use qdsum::quant::{bf16_round, fp8_quantize_value};
use qdsum::synthetic::periodic_model;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// `n` evenly spaced inputs on `[lo, hi]` followed by their rounded values
/// (`2n` numbers). `format` is `fp8`, `bf16` or `int8`; int8 uses a
/// symmetric scale of `max(|lo|, |hi|) / 127`.
#[wasm_bindgen]
pub fn rounding_curve(format: &str, lo: f32, hi: f32, n: usize) -> Result<Vec<f32>, JsError> {
    if n < 2 || !(lo < hi) {
        return Err(JsError::new("need n >= 2 and lo < hi"));
    }
    let scale = lo.abs().max(hi.abs()) / 127.0;
    let round: Box<dyn Fn(f32) -> f32> = match format {
        "fp8" => Box::new(fp8_quantize_value),
        "bf16" => Box::new(bf16_round),
        "int8" => Box::new(move |x: f32| (x / scale).round().clamp(-127.0, 127.0) * scale),
        other => return Err(JsError::new(&format!("unknown format '{other}'"))),
    };
    let xs: Vec<f32> = (0..n)
        .map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32)
        .collect();
    let ys: Vec<f32> = xs.iter().map(|&x| round(x)).collect();
    Ok(xs.into_iter().chain(ys).collect())
}

/// Decodes `tokens` tokens from a model whose greedy output cycles with
/// period `period`, once greedily and once with lookahead `(w, n, v)`.
/// Returns JSON with both token streams, step counts and the acceptance
/// rate, plus per-step emitted counts for the lookahead run.
#[wasm_bindgen]
pub fn lookahead_vs_greedy(
    period: usize,
    tokens: usize,
    w: usize,
    n: usize,
    v: usize,
) -> Result<String, JsError> {
    if !(2..=16).contains(&period) || !(1..=400).contains(&tokens) {
        return Err(JsError::new("period must be 2..=16 and tokens 1..=400"));
    }
    let mut c = ModelConfig::new(1, 2, 32, 64, tokens + 8);
    c.ffn_hidden = 32;
    let cycle: Vec<u32> = (0..period as u32).map(|i| 30 + i).collect();
    let model = periodic_model(c, &cycle, 1).map_err(to_js)?;
    let prompt = [1u32, 2, 3];
    let greedy = decode(&model, &prompt, &DecodeConfig::greedy(tokens)).map_err(to_js)?;
    let la = decode(&model, &prompt, &DecodeConfig::lookahead(tokens, w, n, v)).map_err(to_js)?;
    Ok(json!({
        "greedy": { "tokens": greedy.tokens, "steps": greedy.stats.forward_steps },
        "lookahead": {
            "tokens": la.tokens,
            "steps": la.stats.forward_steps,
            "ar": acceptance_rate(&la.stats),
            "accepted_by_length": la.stats.accepted_by_length,
        },
        "identical": greedy.tokens == la.tokens,
    })
    .to_string())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L recall of `candidate` against the
/// newline-separated `references`, as JSON.
#[wasm_bindgen]
pub fn rouge(candidate: &str, references: &str) -> String {
    let refs: Vec<&str> = references.lines().filter(|l| !l.trim().is_empty()).collect();
    let s = score_text(candidate, &refs);
    json!({ "rouge1": s.rouge1, "rouge2": s.rouge2, "rougeL": s.rouge_l }).to_string()
}

fn to_js(e: qdsum::Error) -> JsError {
    JsError::new(&e.to_string())
}
