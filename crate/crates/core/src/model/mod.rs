//! Decoder-only causal transformer with a scalar regression head.
//!
//! Pre-norm blocks (LayerNorm, multi-head causal self-attention, LayerNorm,
//! GELU feed-forward), learned positional embeddings, a final LayerNorm and
//! an affine head on the hidden state of the last non-pad position. Linear
//! projections carry no bias. The token embedding doubles as the tied output
//! projection for language-model pretraining.
//!
//! Weights use the row-vector convention `y = x W` with `W: d_in x d_out`.

mod engine;
mod lora;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::corpus::{render_markdown, DocumentRecord};
use crate::textcodec::{encode, Batch, TokenId, TokenSequence, VOCAB_SIZE};

pub use engine::{Backward, Mode, Trace};
pub use lora::{Adapter, LayerAdapters, LoraConfig, Projection};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 512,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::invalid(format!(
                "vocab_size {} smaller than the byte vocabulary ({VOCAB_SIZE})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the base model plus head.
    pub fn param_count(&self) -> usize {
        let (d, ff) = (self.d_model, self.d_ff);
        let per_layer = 4 * d + 4 * d * d + 2 * d * ff;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d + 1
    }
}

/// Groups of parameters that are trained or frozen together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Blocks,
    Head,
    Adapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Norm,
    Matrix,
    HeadWeight,
    HeadBias,
    AdapterA,
    AdapterB,
}

impl ParamKind {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamKind::Embedding => ParamGroup::Embeddings,
            ParamKind::Norm | ParamKind::Matrix => ParamGroup::Blocks,
            ParamKind::HeadWeight | ParamKind::HeadBias => ParamGroup::Head,
            ParamKind::AdapterA | ParamKind::AdapterB => ParamGroup::Adapters,
        }
    }

    /// Embeddings, norm parameters and biases are excluded from weight decay.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::Matrix | ParamKind::HeadWeight | ParamKind::AdapterA | ParamKind::AdapterB
        )
    }
}

/// Trainable flag per parameter group. The head flag is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub embeddings: bool,
    pub blocks: bool,
    pub head: bool,
    pub adapters: bool,
}

impl FreezeMask {
    pub const ALL: Self = Self { embeddings: true, blocks: true, head: true, adapters: true };
    pub const HEAD_ONLY: Self = Self { embeddings: false, blocks: false, head: true, adapters: false };
    pub const ADAPTERS_AND_HEAD: Self = Self { embeddings: false, blocks: false, head: true, adapters: true };
    /// Everything in the base language model; the regression head is untouched.
    pub const BASE: Self = Self { embeddings: true, blocks: true, head: false, adapters: false };

    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embeddings => self.embeddings,
            ParamGroup::Blocks => self.blocks,
            ParamGroup::Head => self.head,
            ParamGroup::Adapters => self.adapters,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

impl Layer {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_up: Array2::zeros((d, ff)),
            w_down: Array2::zeros((ff, d)),
        }
    }

    pub fn projection(&self, p: Projection) -> &Array2<f64> {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
        }
    }

    pub(crate) fn projection_mut(&mut self, p: Projection) -> &mut Array2<f64> {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Key => &mut self.wk,
            Projection::Value => &mut self.wv,
            Projection::Output => &mut self.wo,
        }
    }
}

/// Every tensor of the model. Gradients reuse the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<Layer>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head_w: Array1<f64>,
    /// Length-one array so the bias is a tensor like everything else.
    pub head_b: Array1<f64>,
    pub adapters: Option<Vec<LayerAdapters>>,
}

/// Read-only view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f64],
}

macro_rules! push_tensor {
    ($out:ident, $name:expr, $kind:expr, $arr:expr, ref) => {
        $out.push(TensorRef {
            name: $name,
            kind: $kind,
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice().expect("standard layout"),
        })
    };
    ($out:ident, $name:expr, $kind:expr, $arr:expr, mut) => {
        $out.push(TensorMut {
            name: $name,
            kind: $kind,
            data: $arr.as_slice_mut().expect("standard layout"),
        })
    };
}

macro_rules! visit_params {
    ($params:expr, $out:ident, $mode:tt) => {{
        use ParamKind::*;
        push_tensor!($out, "tok_emb".into(), Embedding, $params.tok_emb, $mode);
        push_tensor!($out, "pos_emb".into(), Embedding, $params.pos_emb, $mode);
        for (i, l) in visit_params!(@iter $params.layers, $mode).enumerate() {
            push_tensor!($out, format!("layers.{i}.ln1_g"), Norm, l.ln1_g, $mode);
            push_tensor!($out, format!("layers.{i}.ln1_b"), Norm, l.ln1_b, $mode);
            push_tensor!($out, format!("layers.{i}.wq"), Matrix, l.wq, $mode);
            push_tensor!($out, format!("layers.{i}.wk"), Matrix, l.wk, $mode);
            push_tensor!($out, format!("layers.{i}.wv"), Matrix, l.wv, $mode);
            push_tensor!($out, format!("layers.{i}.wo"), Matrix, l.wo, $mode);
            push_tensor!($out, format!("layers.{i}.ln2_g"), Norm, l.ln2_g, $mode);
            push_tensor!($out, format!("layers.{i}.ln2_b"), Norm, l.ln2_b, $mode);
            push_tensor!($out, format!("layers.{i}.w_up"), Matrix, l.w_up, $mode);
            push_tensor!($out, format!("layers.{i}.w_down"), Matrix, l.w_down, $mode);
        }
        push_tensor!($out, "lnf_g".into(), Norm, $params.lnf_g, $mode);
        push_tensor!($out, "lnf_b".into(), Norm, $params.lnf_b, $mode);
        push_tensor!($out, "head_w".into(), HeadWeight, $params.head_w, $mode);
        push_tensor!($out, "head_b".into(), HeadBias, $params.head_b, $mode);
        if let Some(adapters) = visit_params!(@opt $params.adapters, $mode) {
            for (i, la) in visit_params!(@iter adapters, $mode).enumerate() {
                for (p, ad) in visit_params!(@slots la, $mode) {
                    push_tensor!($out, format!("layers.{i}.{}.lora_a", p.name()), AdapterA, ad.a, $mode);
                    push_tensor!($out, format!("layers.{i}.{}.lora_b", p.name()), AdapterB, ad.b, $mode);
                }
            }
        }
    }};
    (@iter $e:expr, ref) => { $e.iter() };
    (@iter $e:expr, mut) => { $e.iter_mut() };
    (@opt $e:expr, ref) => { $e.as_ref() };
    (@opt $e:expr, mut) => { $e.as_mut() };
    (@slots $e:expr, ref) => { $e.iter() };
    (@slots $e:expr, mut) => { $e.iter_mut() };
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq_len, d)),
            layers: (0..config.n_layers).map(|_| Layer::zeros(d, config.d_ff)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
            adapters: None,
        }
    }

    /// Same structure (including adapters), all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        visit_params!(self, out, ref);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        visit_params!(self, out, mut);
        out
    }

    pub fn count(&self, mask: Option<&FreezeMask>) -> usize {
        self.tensors()
            .iter()
            .filter(|t| mask.is_none_or(|m| m.trains(t.kind.group())))
            .map(|t| t.data.len())
            .sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Transformer parameters plus the regression head and optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionLM {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub params: Params,
}

impl RegressionLM {
    /// Gaussian init (std 0.02, residual output projections scaled by
    /// `1/sqrt(2 n_layers)`), unit norm gains, zero head.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut params = Params::zeros(&config);
        for t in params.tensors_mut() {
            match t.kind {
                ParamKind::Embedding | ParamKind::Matrix => {
                    let dist = if t.name.ends_with(".wo") || t.name.ends_with(".w_down") {
                        &resid
                    } else {
                        &base
                    };
                    t.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                }
                ParamKind::Norm if t.name.ends_with("_g") => t.data.fill(1.0),
                _ => {}
            }
        }
        Ok(Self {
            config,
            lora: None,
            params,
        })
    }

    pub fn head_bias(&self) -> f64 {
        self.params.head_b[0]
    }

    pub fn num_params(&self) -> usize {
        self.params.count(None)
    }

    pub fn num_trainable(&self, mask: &FreezeMask) -> usize {
        self.params.count(Some(mask))
    }

    fn check_tokens(&self, tokens: &[TokenId], mask: &[bool]) -> Result<()> {
        if tokens.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} mask entries",
                tokens.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} >= vocab size")));
        }
        self.check_len(tokens.len())
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if t == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        Ok(())
    }

    /// Token embedding rows for `tokens` (positional embeddings not added).
    pub fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        let mut e = Array2::zeros((tokens.len(), self.config.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            e.row_mut(i).assign(&self.params.tok_emb.row(t as usize));
        }
        e
    }

    /// Final-norm hidden states, one row per position.
    pub fn forward_hidden(&self, tokens: &[TokenId], mask: &[bool]) -> Result<Array2<f64>> {
        self.check_tokens(tokens, mask)?;
        let trace = self.trace(engine::Input::Tokens(tokens), mask, Mode::Eval);
        Ok(trace.hidden)
    }

    /// `w . h_last + b`, `h_last` being the hidden row of the last non-pad position.
    pub fn predict(&self, tokens: &[TokenId], mask: &[bool]) -> Result<f64> {
        self.check_tokens(tokens, mask)?;
        let last = last_position(mask)?;
        let trace = self.trace(engine::Input::Tokens(tokens), mask, Mode::Eval);
        Ok(self.head(&trace.hidden, last))
    }

    pub fn predict_sequence(&self, seq: &TokenSequence) -> Result<f64> {
        self.predict(&seq.ids, &seq.mask())
    }

    /// Predictions for every row of a padded batch.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        (0..batch.len())
            .map(|i| {
                let (ids, mask) = batch.row(i);
                self.predict(&ids, &mask)
            })
            .collect()
    }

    /// Same computation as [`predict`](Self::predict) starting from token
    /// embedding rows `e` (positional embeddings are still added).
    pub fn forward_from_embeddings(&self, e: &Array2<f64>, mask: &[bool]) -> Result<f64> {
        self.check_embeddings(e, mask)?;
        let last = last_position(mask)?;
        let trace = self.trace(engine::Input::Embeddings(e), mask, Mode::Eval);
        Ok(self.head(&trace.hidden, last))
    }

    fn check_embeddings(&self, e: &Array2<f64>, mask: &[bool]) -> Result<()> {
        if e.ncols() != self.config.d_model || e.nrows() != mask.len() {
            return Err(Error::Shape(format!(
                "embeddings {:?} vs d_model {} and {} mask entries",
                e.dim(),
                self.config.d_model,
                mask.len()
            )));
        }
        self.check_len(e.nrows())
    }

    /// Next-token logits through the tied embedding matrix, `T x vocab`.
    pub fn lm_logits(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        let mask = vec![true; tokens.len()];
        self.check_tokens(tokens, &mask)?;
        let trace = self.trace(engine::Input::Tokens(tokens), &mask, Mode::Eval);
        Ok(trace.hidden.dot(&self.params.tok_emb.t()))
    }

    pub(crate) fn head(&self, hidden: &Array2<f64>, last: usize) -> f64 {
        hidden.row(last).dot(&self.params.head_w) + self.head_bias()
    }

    /// Prediction and gradients of the prediction with respect to every
    /// parameter selected by `mask` and to the input token embeddings.
    pub fn predict_with_grad(
        &self,
        tokens: &[TokenId],
        mask: &[bool],
        freeze: &FreezeMask,
    ) -> Result<(f64, Backward)> {
        self.check_tokens(tokens, mask)?;
        let last = last_position(mask)?;
        let trace = self.trace(engine::Input::Tokens(tokens), mask, Mode::Eval);
        let y = self.head(&trace.hidden, last);
        let back = self.backward_regression(&trace, last, 1.0, freeze);
        Ok((y, back))
    }

    /// Gradient of the prediction with respect to supplied embedding rows.
    pub fn embedding_gradient(&self, e: &Array2<f64>, mask: &[bool]) -> Result<(f64, Array2<f64>)> {
        self.check_embeddings(e, mask)?;
        let last = last_position(mask)?;
        let trace = self.trace(engine::Input::Embeddings(e), mask, Mode::Eval);
        let y = self.head(&trace.hidden, last);
        let none = FreezeMask { embeddings: false, blocks: false, head: false, adapters: false };
        let back = self.backward_regression(&trace, last, 1.0, &none);
        Ok((y, back.d_input))
    }

    /// Byte tokens of the rendered document, truncated to `max_seq_len`.
    pub fn encode_document(&self, doc: &DocumentRecord) -> TokenSequence {
        encode(&render_markdown(doc), self.config.max_seq_len)
    }

    pub fn predict_document(&self, doc: &DocumentRecord) -> Result<f64> {
        self.predict_sequence(&self.encode_document(doc))
    }
}

/// Index of the last unmasked position.
pub fn last_position(mask: &[bool]) -> Result<usize> {
    mask.iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::invalid("input has no non-pad positions"))
}
