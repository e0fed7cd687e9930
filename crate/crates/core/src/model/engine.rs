//! Decoder forward passes: full prefill, masked block evaluation over a KV
//! cache, and cache commits.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels::{self, dot, layer_norm_row};
use crate::model::params::{ModelConfig, ParameterSet};
use crate::quant::{KvScaling, QuantMode};

/// Which matmul weight of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearId {
    pub layer: usize,
    pub kind: LinearKind,
}

/// Vector-shaped parameters (layernorm gains/biases and linear biases).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorId {
    Ln1Gain(usize),
    Ln1Bias(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    FfnUpBias(usize),
    FfnDownBias(usize),
    FinalGain,
    FinalBias,
}

/// Weight access needed by the forward pass. Implemented by full-precision
/// parameters and by every quantized representation.
pub trait ForwardWeights: Sync {
    fn config(&self) -> &ModelConfig;

    fn mode(&self) -> QuantMode {
        QuantMode::F32
    }

    fn kv_scaling(&self) -> KvScaling {
        KvScaling::PerToken
    }

    /// Writes `token_embedding[token] + position_embedding[position]`.
    fn embed(&self, token: usize, position: usize, out: &mut [f32]);

    /// `out[rows × out_dim] = x[rows × in_dim] · W`.
    fn linear(&self, id: LinearId, x: &[f32], rows: usize, out: &mut [f32]);

    fn vector(&self, id: VectorId) -> &[f32];

    /// Output head: `out[rows × vocab] = x · W_head`.
    fn head(&self, x: &[f32], rows: usize, out: &mut [f32]);
}

impl ForwardWeights for ParameterSet<f32> {
    fn config(&self) -> &ModelConfig {
        ParameterSet::config(self)
    }

    fn embed(&self, token: usize, position: usize, out: &mut [f32]) {
        let d = out.len();
        let lay = self.layout();
        let te = &self.get(&lay.tok_emb)[token * d..(token + 1) * d];
        let pe = &self.get(&lay.pos_emb)[position * d..(position + 1) * d];
        for i in 0..d {
            out[i] = te[i] + pe[i];
        }
    }

    fn linear(&self, id: LinearId, x: &[f32], rows: usize, out: &mut [f32]) {
        let c = ParameterSet::config(self);
        let (range, k, n) = linear_range(self, id);
        debug_assert_eq!(k * n, range.len());
        let _ = c;
        kernels::matmul(x, self.get(&range), out, rows, k, n);
    }

    fn vector(&self, id: VectorId) -> &[f32] {
        self.get(&vector_range(self, id))
    }

    fn head(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        let c = ParameterSet::config(self);
        let lay = self.layout();
        match &lay.head {
            Some(r) => kernels::matmul(x, self.get(r), out, rows, c.hidden_size, c.vocab_size),
            None => kernels::matmul_bt(
                x,
                self.get(&lay.tok_emb),
                out,
                rows,
                c.hidden_size,
                c.vocab_size,
            ),
        }
    }
}

/// Buffer range and `(in, out)` dims of a linear weight.
pub(crate) fn linear_range<F: crate::kernels::Scalar>(
    p: &ParameterSet<F>,
    id: LinearId,
) -> (std::ops::Range<usize>, usize, usize) {
    let c = p.config();
    let (d, f) = (c.hidden_size, c.ffn_hidden);
    let l = &p.layout().layers[id.layer];
    match id.kind {
        LinearKind::Query => (l.wq.clone(), d, d),
        LinearKind::Key => (l.wk.clone(), d, d),
        LinearKind::Value => (l.wv.clone(), d, d),
        LinearKind::Output => (l.wo.clone(), d, d),
        LinearKind::FfnUp => (l.w1.clone(), d, f),
        LinearKind::FfnDown => (l.w2.clone(), f, d),
    }
}

pub(crate) fn vector_range<F: crate::kernels::Scalar>(
    p: &ParameterSet<F>,
    id: VectorId,
) -> std::ops::Range<usize> {
    let lay = p.layout();
    match id {
        VectorId::Ln1Gain(l) => lay.layers[l].ln1_gain.clone(),
        VectorId::Ln1Bias(l) => lay.layers[l].ln1_bias.clone(),
        VectorId::Ln2Gain(l) => lay.layers[l].ln2_gain.clone(),
        VectorId::Ln2Bias(l) => lay.layers[l].ln2_bias.clone(),
        VectorId::FfnUpBias(l) => lay.layers[l].b1.clone(),
        VectorId::FfnDownBias(l) => lay.layers[l].b2.clone(),
        VectorId::FinalGain => lay.lnf_gain.clone(),
        VectorId::FinalBias => lay.lnf_bias.clone(),
    }
}

/// Row-major `rows × cols` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-layer attention keys and values for the confirmed prefix.
///
/// Rows are `[n_heads × head_dim]` flattened. Entries are stored exactly
/// as the attention consumed them, so under FP8 KV quantization they are
/// already rounded.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    hidden: usize,
    capacity: usize,
    mode: QuantMode,
}

impl KvCache {
    pub fn new(config: &ModelConfig, mode: QuantMode) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            hidden: config.hidden_size,
            capacity: config.max_seq_len,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.len
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            for l in 0..self.keys.len() {
                self.keys[l].truncate(len * self.hidden);
                self.values[l].truncate(len * self.hidden);
            }
            self.len = len;
        }
    }

    /// Appends the selected rows of a block's keys and values, in order.
    ///
    /// The caller guarantees that the selected rows form a causal chain
    /// (each row attended exactly to the cache and the earlier selected
    /// rows), so the result equals a recompute over those tokens.
    pub fn append_block_rows(&mut self, kv: &BlockKv, rows: &[usize]) -> Result<()> {
        if self.len + rows.len() > self.capacity {
            return Err(Error::Length(format!(
                "cache holds {} of {} positions, cannot append {}",
                self.len,
                self.capacity,
                rows.len()
            )));
        }
        let d = self.hidden;
        for l in 0..self.keys.len() {
            for &r in rows {
                self.keys[l].extend_from_slice(&kv.keys[l][r * d..(r + 1) * d]);
                self.values[l].extend_from_slice(&kv.values[l][r * d..(r + 1) * d]);
            }
        }
        self.len += rows.len();
        Ok(())
    }

    /// Extends the cache with `accepted` tokens, computing their keys and
    /// values at positions `len..len + accepted.len()`.
    pub fn commit<W: ForwardWeights + ?Sized>(
        &mut self,
        weights: &W,
        accepted: &[u32],
    ) -> Result<()> {
        if accepted.is_empty() {
            return Ok(());
        }
        if self.len + accepted.len() > self.capacity {
            return Err(Error::Length(format!(
                "committing {} tokens overflows the context ({} of {} used)",
                accepted.len(),
                self.len,
                self.capacity
            )));
        }
        let mask = AttentionMask::causal(self.len, accepted.len());
        let out = run_block(weights, self, accepted, &mask, &[])?;
        let rows: Vec<usize> = (0..accepted.len()).collect();
        self.append_block_rows(&out.kv, &rows)
    }
}

/// Keys and values produced for every row of a block.
#[derive(Debug, Clone)]
pub struct BlockKv {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// Attention pattern of a block appended after a cache.
///
/// Every row attends to all cache positions and to itself; `allowed[i][j]`
/// for `j < i` says whether row `i` also sees block row `j`. A row's
/// position id is `cache_len` plus the number of earlier block rows it
/// sees, so a chain of rows takes consecutive positions after the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    cache_len: usize,
    block_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(cache_len: usize, block_len: usize) -> Self {
        let mut allowed = vec![false; block_len * block_len];
        for i in 0..block_len {
            for j in 0..=i {
                allowed[i * block_len + j] = true;
            }
        }
        Self {
            cache_len,
            block_len,
            allowed,
        }
    }

    /// Builds a mask from, for each row, the earlier block rows it sees.
    pub fn from_parents(cache_len: usize, parents: &[Vec<usize>]) -> Result<Self> {
        let n = parents.len();
        let mut allowed = vec![false; n * n];
        for (i, ps) in parents.iter().enumerate() {
            allowed[i * n + i] = true;
            for &j in ps {
                if j >= i {
                    return Err(Error::Shape(format!(
                        "row {i} may not attend to block row {j}"
                    )));
                }
                allowed[i * n + j] = true;
            }
        }
        Ok(Self {
            cache_len,
            block_len: n,
            allowed,
        })
    }

    pub fn cache_len(&self) -> usize {
        self.cache_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Whether block row `i` may attend to absolute column `j`
    /// (`j < cache_len` are cache positions).
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if j < self.cache_len {
            return true;
        }
        let b = j - self.cache_len;
        b < self.block_len && self.allowed[i * self.block_len + b]
    }

    pub fn position(&self, i: usize) -> usize {
        let row = &self.allowed[i * self.block_len..i * self.block_len + i];
        self.cache_len + row.iter().filter(|&&a| a).count()
    }

    fn attended(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.allowed[i * self.block_len..i * self.block_len + i + 1];
        row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j)
    }
}

/// Which block rows need output logits.
#[derive(Debug, Clone, Copy)]
pub enum LogitRows<'a> {
    All,
    Only(&'a [usize]),
}

/// Result of a block evaluation.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Logits for the requested rows, in request order.
    pub logits: Matrix,
    pub kv: BlockKv,
}

/// Full-sequence forward from an empty cache. Returns `[T × vocab]` logits
/// and the populated cache.
pub fn forward_full<W: ForwardWeights + ?Sized>(
    weights: &W,
    tokens: &[u32],
) -> Result<(Matrix, KvCache)> {
    let c = weights.config();
    if tokens.is_empty() {
        return Err(Error::Length("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(Error::Length(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    let mut cache = KvCache::new(c, weights.mode());
    let mask = AttentionMask::causal(0, tokens.len());
    let out = forward_block_rows(weights, &cache, tokens, &mask, LogitRows::All)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    cache.append_block_rows(&out.kv, &rows)?;
    Ok((out.logits, cache))
}

/// Runs the prompt through an empty cache and returns the logits of its
/// last position together with the filled cache.
pub fn prefill<W: ForwardWeights + ?Sized>(
    weights: &W,
    tokens: &[u32],
) -> Result<(Vec<f32>, KvCache)> {
    let c = weights.config();
    if tokens.is_empty() {
        return Err(Error::Length("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(Error::Length(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    let mut cache = KvCache::new(c, weights.mode());
    let mask = AttentionMask::causal(0, tokens.len());
    let last = [tokens.len() - 1];
    let out = run_block(weights, &cache, tokens, &mask, &last)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    cache.append_block_rows(&out.kv, &rows)?;
    Ok((out.logits.data, cache))
}

/// Evaluates `block` after `cache` under `mask` without mutating the cache.
/// Returns logits for every block row.
pub fn forward_block<W: ForwardWeights + ?Sized>(
    weights: &W,
    cache: &KvCache,
    block: &[u32],
    mask: &AttentionMask,
) -> Result<Matrix> {
    Ok(forward_block_rows(weights, cache, block, mask, LogitRows::All)?.logits)
}

/// Like [`forward_block`], computing logits only for `rows` and also
/// returning the block's keys and values.
pub fn forward_block_rows<W: ForwardWeights + ?Sized>(
    weights: &W,
    cache: &KvCache,
    block: &[u32],
    mask: &AttentionMask,
    rows: LogitRows<'_>,
) -> Result<BlockOutput> {
    let all: Vec<usize>;
    let rows = match rows {
        LogitRows::All => {
            all = (0..block.len()).collect();
            &all[..]
        }
        LogitRows::Only(r) => r,
    };
    run_block(weights, cache, block, mask, rows)
}

/// Extends `cache` with `accepted`; see [`KvCache::commit`].
pub fn cache_commit<W: ForwardWeights + ?Sized>(
    cache: &mut KvCache,
    accepted: &[u32],
    weights: &W,
) -> Result<()> {
    cache.commit(weights, accepted)
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

#[derive(Default)]
struct Scratch {
    x: Vec<f32>,
    h: Vec<f32>,
    q: Vec<f32>,
    att: Vec<f32>,
    proj: Vec<f32>,
    ff: Vec<f32>,
    scores: Vec<f32>,
}

fn run_block<W: ForwardWeights + ?Sized>(
    w: &W,
    cache: &KvCache,
    block: &[u32],
    mask: &AttentionMask,
    logit_rows: &[usize],
) -> Result<BlockOutput> {
    let c = *w.config();
    let b = block.len();
    if b == 0 {
        return Err(Error::Length("empty block".into()));
    }
    if mask.block_len() != b || mask.cache_len() != cache.len() {
        return Err(Error::Shape(format!(
            "mask is {}+{}, cache/block are {}+{}",
            mask.cache_len(),
            mask.block_len(),
            cache.len(),
            b
        )));
    }
    if cache.mode() != w.mode() {
        return Err(Error::Shape(format!(
            "cache built for {:?} used with {:?} weights",
            cache.mode(),
            w.mode()
        )));
    }
    if cache.len() + b > c.max_seq_len {
        return Err(Error::Length(format!(
            "cache {} + block {} exceeds max_seq_len {}",
            cache.len(),
            b,
            c.max_seq_len
        )));
    }
    if let Some(&t) = block.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {t} out of range for vocab {}",
            c.vocab_size
        )));
    }
    if let Some(&r) = logit_rows.iter().find(|&&r| r >= b) {
        return Err(Error::Shape(format!("logit row {r} outside block of {b}")));
    }

    let d = c.hidden_size;
    let f = c.ffn_hidden;
    let nh = c.n_heads;
    let hd = c.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let mode = w.mode();
    let kv_scaling = w.kv_scaling();
    let l_cache = cache.len();

    SCRATCH.with(|s| {
        let s = &mut *s.borrow_mut();
        s.x.resize(b * d, 0.0);
        s.h.resize(b * d, 0.0);
        s.q.resize(b * d, 0.0);
        s.att.resize(b * d, 0.0);
        s.proj.resize(b * d, 0.0);
        s.ff.resize(b * f, 0.0);

        for (i, &t) in block.iter().enumerate() {
            let pos = mask.position(i);
            w.embed(t as usize, pos, &mut s.x[i * d..(i + 1) * d]);
            mode.round_boundary(&mut s.x[i * d..(i + 1) * d]);
        }

        let mut kv = BlockKv {
            keys: Vec::with_capacity(c.n_layers),
            values: Vec::with_capacity(c.n_layers),
        };

        for layer in 0..c.n_layers {
            let g = w.vector(VectorId::Ln1Gain(layer));
            let bb = w.vector(VectorId::Ln1Bias(layer));
            for i in 0..b {
                layer_norm_row(
                    &s.x[i * d..(i + 1) * d],
                    g,
                    bb,
                    &mut s.h[i * d..(i + 1) * d],
                );
            }
            let id = |kind| LinearId { layer, kind };
            w.linear(id(LinearKind::Query), &s.h, b, &mut s.q);
            let mut keys = vec![0f32; b * d];
            let mut values = vec![0f32; b * d];
            w.linear(id(LinearKind::Key), &s.h, b, &mut keys);
            w.linear(id(LinearKind::Value), &s.h, b, &mut values);
            for i in 0..b {
                mode.round_kv(&mut keys[i * d..(i + 1) * d], nh, kv_scaling);
                mode.round_kv(&mut values[i * d..(i + 1) * d], nh, kv_scaling);
            }

            let ck = cache.keys(layer);
            let cv = cache.values(layer);
            for i in 0..b {
                let out = &mut s.att[i * d..(i + 1) * d];
                out.fill(0.0);
                for h in 0..nh {
                    let qh = &s.q[i * d + h * hd..i * d + (h + 1) * hd];
                    s.scores.clear();
                    for t in 0..l_cache {
                        s.scores
                            .push(dot(qh, &ck[t * d + h * hd..t * d + (h + 1) * hd]) * scale);
                    }
                    for j in mask.attended(i) {
                        s.scores
                            .push(dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale);
                    }
                    let m = s.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0f32;
                    for v in s.scores.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    let oh = &mut out[h * hd..(h + 1) * hd];
                    for t in 0..l_cache {
                        let p = s.scores[t] / sum;
                        let vrow = &cv[t * d + h * hd..t * d + (h + 1) * hd];
                        for e in 0..hd {
                            oh[e] += p * vrow[e];
                        }
                    }
                    for (slot, j) in mask.attended(i).enumerate() {
                        let p = s.scores[l_cache + slot] / sum;
                        let vrow = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        for e in 0..hd {
                            oh[e] += p * vrow[e];
                        }
                    }
                }
            }
            w.linear(id(LinearKind::Output), &s.att, b, &mut s.proj);
            for (xv, pv) in s.x.iter_mut().zip(&s.proj) {
                *xv += *pv;
            }

            let g = w.vector(VectorId::Ln2Gain(layer));
            let bb = w.vector(VectorId::Ln2Bias(layer));
            for i in 0..b {
                layer_norm_row(
                    &s.x[i * d..(i + 1) * d],
                    g,
                    bb,
                    &mut s.h[i * d..(i + 1) * d],
                );
            }
            w.linear(id(LinearKind::FfnUp), &s.h, b, &mut s.ff);
            let b1 = w.vector(VectorId::FfnUpBias(layer));
            for i in 0..b {
                for (v, &bias) in s.ff[i * f..(i + 1) * f].iter_mut().zip(b1) {
                    *v = kernels::gelu(*v + bias);
                }
            }
            w.linear(id(LinearKind::FfnDown), &s.ff, b, &mut s.proj);
            let b2 = w.vector(VectorId::FfnDownBias(layer));
            for i in 0..b {
                let xr = &mut s.x[i * d..(i + 1) * d];
                for e in 0..d {
                    xr[e] += s.proj[i * d + e] + b2[e];
                }
                mode.round_boundary(xr);
            }
            kv.keys.push(keys);
            kv.values.push(values);
        }

        let nr = logit_rows.len();
        let mut logits = Matrix::zeros(nr, c.vocab_size);
        if nr > 0 {
            let g = w.vector(VectorId::FinalGain);
            let bb = w.vector(VectorId::FinalBias);
            let mut hf = vec![0f32; nr * d];
            for (o, &r) in logit_rows.iter().enumerate() {
                layer_norm_row(&s.x[r * d..(r + 1) * d], g, bb, &mut hf[o * d..(o + 1) * d]);
            }
            w.head(&hf, nr, &mut logits.data);
            for o in 0..nr {
                mode.round_boundary(logits.row_mut(o));
            }
        }
        Ok(BlockOutput { logits, kv })
    })
}
