//! Simulated low-precision numerics: bf16 baseline, INT8 weight-only and
//! FP8 (E4M3) weights + activations + KV cache.
//!
//! Quantized weights are dequantized once at conversion or load time; the
//! forward pass multiplies by those dequantized values, which is the same
//! computation as dequantizing inside every matmul.

mod formats;
pub mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use formats::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::engine::{linear_range, vector_range, ForwardWeights, LinearId, VectorId};
use crate::model::params::{ModelConfig, ParameterSet, TensorKind};

/// Numeric mode of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    F32,
    Bf16Sim,
    Int8WeightOnly,
    Fp8W8A8Kv,
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] = [
        QuantMode::F32,
        QuantMode::Bf16Sim,
        QuantMode::Int8WeightOnly,
        QuantMode::Fp8W8A8Kv,
    ];

    pub fn tag(self) -> u32 {
        match self {
            QuantMode::F32 => 0,
            QuantMode::Bf16Sim => 1,
            QuantMode::Int8WeightOnly => 2,
            QuantMode::Fp8W8A8Kv => 3,
        }
    }

    pub fn from_tag(t: u32) -> Result<Self> {
        Ok(match t {
            0 => QuantMode::F32,
            1 => QuantMode::Bf16Sim,
            2 => QuantMode::Int8WeightOnly,
            3 => QuantMode::Fp8W8A8Kv,
            _ => return Err(Error::Format(format!("unknown quantization mode tag {t}"))),
        })
    }

    /// Rounding applied to the residual stream and logits (bf16 only).
    #[inline]
    pub fn round_boundary(self, xs: &mut [f32]) {
        if self == QuantMode::Bf16Sim {
            for v in xs {
                *v = bf16_round(*v);
            }
        }
    }

    /// Rounding applied to one token's key or value row on cache write.
    #[inline]
    pub fn round_kv(self, row: &mut [f32], n_heads: usize, scaling: KvScaling) {
        if self != QuantMode::Fp8W8A8Kv {
            return;
        }
        match scaling {
            KvScaling::PerToken => fp8_fake_quant(row),
            KvScaling::PerHead => {
                let hd = row.len() / n_heads;
                for h in row.chunks_mut(hd) {
                    fp8_fake_quant(h);
                }
            }
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::F32 => "f32",
            QuantMode::Bf16Sim => "bf16",
            QuantMode::Int8WeightOnly => "int8",
            QuantMode::Fp8W8A8Kv => "fp8",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => QuantMode::F32,
            "bf16" | "bf16-sim" => QuantMode::Bf16Sim,
            "int8" | "int8-wo" => QuantMode::Int8WeightOnly,
            "fp8" | "fp8-w8a8-kv" => QuantMode::Fp8W8A8Kv,
            _ => return Err(Error::Config(format!("unknown quantization mode '{s}'"))),
        })
    }
}

/// Granularity of the dynamic FP8 scale for cached keys and values.
///
/// Every cache row gets its scale when it is written and never changes
/// afterwards, so a row's rounded value does not depend on how many tokens
/// follow it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum KvScaling {
    #[default]
    PerToken,
    PerHead,
}

impl KvScaling {
    pub fn tag(self) -> u32 {
        match self {
            KvScaling::PerToken => 0,
            KvScaling::PerHead => 1,
        }
    }

    pub fn from_tag(t: u32) -> Result<Self> {
        match t {
            0 => Ok(KvScaling::PerToken),
            1 => Ok(KvScaling::PerHead),
            _ => Err(Error::Format(format!("unknown kv scaling tag {t}"))),
        }
    }
}

impl FromStr for KvScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" | "per-token" => Ok(KvScaling::PerToken),
            "head" | "per-head" => Ok(KvScaling::PerHead),
            _ => Err(Error::Config(format!("unknown kv scaling '{s}'"))),
        }
    }
}

/// Stored representation of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Int8(QuantTensorI8),
    Fp8(Fp8Tensor),
}

/// Weights converted to one quantized mode.
#[derive(Debug, Clone)]
pub struct QuantizedParameterSet {
    mode: QuantMode,
    kv_scaling: KvScaling,
    payloads: Vec<Payload>,
    dense: ParameterSet,
}

/// `(rows, cols, channel axis)` used to quantize a tensor as a matrix.
/// Embedding tables get one scale per row (token or position), matmul
/// weights `[in × out]` one scale per output column.
fn matrix_view(shape: &[usize], kind: TensorKind) -> (usize, usize, usize) {
    let rows = shape[0];
    let cols = shape.get(1).copied().unwrap_or(1);
    let axis = if kind == TensorKind::Embedding { 0 } else { 1 };
    (rows, cols, axis)
}

impl QuantizedParameterSet {
    pub fn quantize(params: &ParameterSet, mode: QuantMode, kv_scaling: KvScaling) -> Result<Self> {
        if !params.all_finite() {
            return Err(Error::Numeric(
                "cannot quantize non-finite parameters".into(),
            ));
        }
        let mut payloads = Vec::with_capacity(params.layout().specs.len());
        for spec in &params.layout().specs {
            let t = params.get(&spec.range);
            let matrix = matches!(spec.kind, TensorKind::Embedding | TensorKind::Matrix);
            let (rows, cols, axis) = matrix_view(&spec.shape, spec.kind);
            let p = match mode {
                QuantMode::F32 => Payload::F32(t.to_vec()),
                QuantMode::Bf16Sim => Payload::F32(t.iter().map(|&v| bf16_round(v)).collect()),
                QuantMode::Int8WeightOnly if matrix => {
                    Payload::Int8(quantize_int8(t, rows, cols, axis)?)
                }
                QuantMode::Fp8W8A8Kv if matrix => Payload::Fp8(Fp8Tensor::quantize(t, rows, cols)?),
                _ => Payload::F32(t.to_vec()),
            };
            payloads.push(p);
        }
        Self::from_payloads(*params.config(), mode, kv_scaling, payloads)
    }

    pub(crate) fn from_payloads(
        config: ModelConfig,
        mode: QuantMode,
        kv_scaling: KvScaling,
        payloads: Vec<Payload>,
    ) -> Result<Self> {
        let mut dense = ParameterSet::zeros(config)?;
        if payloads.len() != dense.layout().specs.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                dense.layout().specs.len(),
                payloads.len()
            )));
        }
        let specs = dense.layout().specs.clone();
        for (spec, p) in specs.iter().zip(&payloads) {
            let values = match p {
                Payload::F32(v) => v.clone(),
                Payload::Int8(q) => dequantize_int8(q),
                Payload::Fp8(f) => f.dequantize(),
            };
            if values.len() != spec.range.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    values.len(),
                    spec.range.len()
                )));
            }
            dense.get_mut(&spec.range).copy_from_slice(&values);
        }
        Ok(Self {
            mode,
            kv_scaling,
            payloads,
            dense,
        })
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn kv_scaling(&self) -> KvScaling {
        self.kv_scaling
    }

    pub fn config(&self) -> &ModelConfig {
        self.dense.config()
    }

    pub fn payloads(&self) -> &[Payload] {
        &self.payloads
    }

    /// Full-precision view of the (rounded) weights.
    pub fn dequantize(&self) -> &ParameterSet {
        &self.dense
    }

    fn round_activations<'a>(&self, x: &'a [f32], cols: usize, buf: &'a mut Vec<f32>) -> &'a [f32] {
        if self.mode != QuantMode::Fp8W8A8Kv {
            return x;
        }
        buf.clear();
        buf.extend_from_slice(x);
        for row in buf.chunks_mut(cols) {
            fp8_fake_quant(row);
        }
        buf
    }
}

thread_local! {
    static ACT: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

impl ForwardWeights for QuantizedParameterSet {
    fn config(&self) -> &ModelConfig {
        self.dense.config()
    }

    fn mode(&self) -> QuantMode {
        self.mode
    }

    fn kv_scaling(&self) -> KvScaling {
        self.kv_scaling
    }

    fn embed(&self, token: usize, position: usize, out: &mut [f32]) {
        self.dense.embed(token, position, out)
    }

    fn linear(&self, id: LinearId, x: &[f32], rows: usize, out: &mut [f32]) {
        let (range, k, n) = linear_range(&self.dense, id);
        ACT.with(|b| {
            let mut b = b.borrow_mut();
            let xq = self.round_activations(x, k, &mut b);
            kernels::matmul(xq, self.dense.get(&range), out, rows, k, n);
        })
    }

    fn vector(&self, id: VectorId) -> &[f32] {
        self.dense.get(&vector_range(&self.dense, id))
    }

    fn head(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        let d = self.dense.config().hidden_size;
        ACT.with(|b| {
            let mut b = b.borrow_mut();
            let xq = self.round_activations(x, d, &mut b);
            self.dense.head(xq, rows, out);
        })
    }
}

/// A servable model in any numeric mode.
#[derive(Debug, Clone)]
pub enum Model {
    Full(ParameterSet),
    Quantized(QuantizedParameterSet),
}

impl Model {
    /// Loads an f32 (version 1) or quantized (version 2) checkpoint.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        store::load_model(path)
    }

    /// Converts to `mode`. Converting an already quantized model
    /// re-quantizes its dequantized weights.
    pub fn to_mode(&self, mode: QuantMode, kv_scaling: KvScaling) -> Result<Model> {
        let base = self.params();
        if mode == QuantMode::F32 {
            return Ok(Model::Full(base.clone()));
        }
        Ok(Model::Quantized(QuantizedParameterSet::quantize(
            base, mode, kv_scaling,
        )?))
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            Model::Full(p) => p,
            Model::Quantized(q) => q.dequantize(),
        }
    }
}

impl From<ParameterSet> for Model {
    fn from(p: ParameterSet) -> Self {
        Model::Full(p)
    }
}

impl ForwardWeights for Model {
    fn config(&self) -> &ModelConfig {
        match self {
            Model::Full(p) => ForwardWeights::config(p),
            Model::Quantized(q) => ForwardWeights::config(q),
        }
    }

    fn mode(&self) -> QuantMode {
        match self {
            Model::Full(_) => QuantMode::F32,
            Model::Quantized(q) => q.mode,
        }
    }

    fn kv_scaling(&self) -> KvScaling {
        match self {
            Model::Full(_) => KvScaling::PerToken,
            Model::Quantized(q) => q.kv_scaling,
        }
    }

    fn embed(&self, token: usize, position: usize, out: &mut [f32]) {
        match self {
            Model::Full(p) => p.embed(token, position, out),
            Model::Quantized(q) => q.embed(token, position, out),
        }
    }

    fn linear(&self, id: LinearId, x: &[f32], rows: usize, out: &mut [f32]) {
        match self {
            Model::Full(p) => p.linear(id, x, rows, out),
            Model::Quantized(q) => q.linear(id, x, rows, out),
        }
    }

    fn vector(&self, id: VectorId) -> &[f32] {
        match self {
            Model::Full(p) => p.vector(id),
            Model::Quantized(q) => q.vector(id),
        }
    }

    fn head(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        match self {
            Model::Full(p) => p.head(x, rows, out),
            Model::Quantized(q) => q.head(x, rows, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::engine::forward_full;
    use crate::model::params::ModelConfig;

    fn tiny() -> ParameterSet {
        ParameterSet::init(ModelConfig::new(2, 2, 16, 40, 24), 11).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in QuantMode::ALL {
            assert_eq!(m.to_string().parse::<QuantMode>().unwrap(), m);
            assert_eq!(QuantMode::from_tag(m.tag()).unwrap(), m);
        }
        assert!("int4".parse::<QuantMode>().is_err());
    }

    #[test]
    fn int8_exactly_representable_weights_give_identical_logits() {
        let mut p = tiny();
        // snap every matrix column to a grid of its own int8 scale
        for spec in p.layout().specs.clone() {
            if !matches!(spec.kind, TensorKind::Embedding | TensorKind::Matrix) {
                continue;
            }
            let (rows, cols, axis) = matrix_view(&spec.shape, spec.kind);
            let q = quantize_int8(p.get(&spec.range), rows, cols, axis).unwrap();
            let snapped = dequantize_int8(&q);
            p.get_mut(&spec.range).copy_from_slice(&snapped);
        }
        let q = QuantizedParameterSet::quantize(&p, QuantMode::Int8WeightOnly, KvScaling::PerToken)
            .unwrap();
        assert_eq!(q.dequantize().as_slice(), p.as_slice());
        let tokens = [1u32, 5, 9, 2, 33, 7];
        let (a, _) = forward_full(&p, &tokens).unwrap();
        let (b, _) = forward_full(&q, &tokens).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn int8_forward_matches_dequantize_then_multiply() {
        let p = tiny();
        let q = QuantizedParameterSet::quantize(&p, QuantMode::Int8WeightOnly, KvScaling::PerToken)
            .unwrap();
        let mut reference = p.clone();
        for (spec, payload) in p.layout().specs.iter().zip(q.payloads()) {
            if let Payload::Int8(t) = payload {
                reference
                    .get_mut(&spec.range)
                    .copy_from_slice(&dequantize_int8(t));
            }
        }
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let (a, _) = forward_full(&reference, &tokens).unwrap();
        let (b, _) = forward_full(&q, &tokens).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn quantized_modes_stay_close_to_f32() {
        let p = tiny();
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let (base, _) = forward_full(&p, &tokens).unwrap();
        for mode in [
            QuantMode::Bf16Sim,
            QuantMode::Int8WeightOnly,
            QuantMode::Fp8W8A8Kv,
        ] {
            let q = QuantizedParameterSet::quantize(&p, mode, KvScaling::PerToken).unwrap();
            let (l, _) = forward_full(&q, &tokens).unwrap();
            let max = base
                .data
                .iter()
                .zip(&l.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(max > 0.0, "{mode} changed nothing");
            assert!(max < 0.5, "{mode} deviates by {max}");
        }
    }

    #[test]
    fn layer_norm_and_bias_vectors_stay_full_precision() {
        let mut p = tiny();
        let r = p.layout().layers[0].b1.clone();
        p.get_mut(&r)[0] = 0.123_456_7;
        for mode in [QuantMode::Int8WeightOnly, QuantMode::Fp8W8A8Kv] {
            let q = QuantizedParameterSet::quantize(&p, mode, KvScaling::PerHead).unwrap();
            assert_eq!(q.dequantize().get(&r)[0], 0.123_456_7);
        }
    }
}
