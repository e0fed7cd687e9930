use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Scalar;

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    pub tie_output_head: bool,
}

impl ModelConfig {
    /// 2 layers, 4 heads, hidden 64, vocab 512, context 512.
    pub fn desk() -> Self {
        Self::new(2, 4, 64, 512, 512)
    }

    /// Larger instance used as the distillation teacher at desk scale.
    pub fn desk_teacher() -> Self {
        Self::new(4, 4, 128, 512, 512)
    }

    /// GPT-2 small topology (12 layers, hidden 768).
    pub fn production() -> Self {
        Self::new(12, 12, 768, 50_257, 1024)
    }

    /// Config with `ffn_hidden = 4·hidden` and a tied output head.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        hidden_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            hidden_size,
            vocab_size,
            max_seq_len,
            ffn_hidden: 4 * hidden_size,
            tie_output_head: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden_size", self.hidden_size),
            ("vocab_size", self.vocab_size),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config(
                "vocab_size exceeds the token id range".into(),
            ));
        }
        Ok(())
    }
}

/// Location of one layer's tensors inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct LayerRanges {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Role of a tensor, which decides its initialization and quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Token or position embedding table, `[rows × hidden]`.
    Embedding,
    /// Matmul weight stored `[in × out]`.
    Matrix,
    /// Layernorm gain.
    Gain,
    /// Layernorm bias or linear bias.
    Bias,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    pub kind: TensorKind,
}

/// Fixed tensor order shared by parameter buffers and checkpoints:
/// `tok_emb, pos_emb, layer{i}.{ln1.gain, ln1.bias, attn.wq, attn.wk,
/// attn.wv, attn.wo, ln2.gain, ln2.bias, ffn.w1, ffn.b1, ffn.w2, ffn.b2}`,
/// `lnf.gain, lnf.bias`, then `head` when the output head is untied.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub lnf_gain: Range<usize>,
    pub lnf_bias: Range<usize>,
    pub head: Option<Range<usize>>,
    pub specs: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.hidden_size;
        let f = c.ffn_hidden;
        let mut specs = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| -> Range<usize> {
            let n: usize = shape.iter().product();
            let r = off..off + n;
            off += n;
            specs.push(TensorSpec {
                name,
                shape,
                range: r.clone(),
                kind,
            });
            r
        };
        let tok_emb = push(
            "tok_emb".into(),
            vec![c.vocab_size, d],
            TensorKind::Embedding,
        );
        let pos_emb = push(
            "pos_emb".into(),
            vec![c.max_seq_len, d],
            TensorKind::Embedding,
        );
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerRanges {
                ln1_gain: push(p("ln1.gain"), vec![d], TensorKind::Gain),
                ln1_bias: push(p("ln1.bias"), vec![d], TensorKind::Bias),
                wq: push(p("attn.wq"), vec![d, d], TensorKind::Matrix),
                wk: push(p("attn.wk"), vec![d, d], TensorKind::Matrix),
                wv: push(p("attn.wv"), vec![d, d], TensorKind::Matrix),
                wo: push(p("attn.wo"), vec![d, d], TensorKind::Matrix),
                ln2_gain: push(p("ln2.gain"), vec![d], TensorKind::Gain),
                ln2_bias: push(p("ln2.bias"), vec![d], TensorKind::Bias),
                w1: push(p("ffn.w1"), vec![d, f], TensorKind::Matrix),
                b1: push(p("ffn.b1"), vec![f], TensorKind::Bias),
                w2: push(p("ffn.w2"), vec![f, d], TensorKind::Matrix),
                b2: push(p("ffn.b2"), vec![d], TensorKind::Bias),
            });
        }
        let lnf_gain = push("lnf.gain".into(), vec![d], TensorKind::Gain);
        let lnf_bias = push("lnf.bias".into(), vec![d], TensorKind::Bias);
        let head = (!c.tie_output_head)
            .then(|| push("head".into(), vec![d, c.vocab_size], TensorKind::Matrix));
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            head,
            specs,
            total: off,
        }
    }
}

/// All weights of the decoder, stored in one flat buffer following [`Layout`].
///
/// The same type holds gradients and optimizer moments, which mirror the
/// parameter shapes exactly.
#[derive(Debug, Clone)]
pub struct ParameterSet<F = f32> {
    config: ModelConfig,
    layout: Layout,
    data: Vec<F>,
}

/// Gradient buffer; shares the parameter layout.
pub type Gradients<F = f32> = ParameterSet<F>;

impl<F: Scalar> ParameterSet<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![F::zero(); layout.total];
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Weights ~ N(0, 0.02), biases zero, layernorm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        for spec in p.layout.specs.clone() {
            let t = &mut p.data[spec.range];
            match spec.kind {
                TensorKind::Embedding | TensorKind::Matrix => {
                    for v in t.iter_mut() {
                        *v = F::of_f64(normal.sample(&mut rng));
                    }
                }
                TensorKind::Gain => t.fill(F::one()),
                TensorKind::Bias => t.fill(F::zero()),
            }
        }
        Ok(p)
    }

    pub fn from_vec(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Shape(format!(
                "parameter buffer has {} elements, config needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: &Range<usize>) -> &[F] {
        &self.data[r.clone()]
    }

    #[inline]
    pub fn get_mut(&mut self, r: &Range<usize>) -> &mut [F] {
        &mut self.data[r.clone()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range.clone()])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            data: vec![F::zero(); self.data.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(F::zero());
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        ParameterSet {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
        }
    }

    /// `self += other · scale`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }
}
