//! Vocabulary, context layout, the micro causal transformer, and checkpoint
//! persistence.
//!
//! One [`ModelParams`] instance is one policy: a pre-norm decoder-only
//! transformer with learned positional embeddings and an untied output
//! projection. The forward pass produces a full logits row per position in
//! one evaluation, which is what both training and parallel decoding consume.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::numkit::{kernels, DenseArray};
use crate::{Token, TokenSeq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Vocabulary layout. The reserved indices and the three content/style
/// ranges are disjoint and jointly cover `[0, size)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub content: (Token, Token),
    pub style_plus: (Token, Token),
    pub style_minus: (Token, Token),
}

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;

impl Default for VocabSpec {
    fn default() -> Self {
        Self { size: 64, content: (4, 43), style_plus: (44, 53), style_minus: (54, 63) }
    }
}

impl VocabSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ranges = [self.content, self.style_plus, self.style_minus];
        let mut covered = vec![false; self.size];
        for t in [PAD, BOS, EOS, SEP] {
            covered[t as usize] = true;
        }
        for (lo, hi) in ranges {
            if lo > hi || hi as usize >= self.size {
                return Err(ModelError::InvalidArgument(format!("bad range {lo}..={hi}")));
            }
            for t in lo..=hi {
                if covered[t as usize] {
                    return Err(ModelError::InvalidArgument(format!("index {t} covered twice")));
                }
                covered[t as usize] = true;
            }
        }
        if covered.iter().any(|&c| !c) {
            return Err(ModelError::InvalidArgument("ranges do not cover the vocabulary".into()));
        }
        Ok(())
    }

    pub fn is_content(&self, t: Token) -> bool {
        (self.content.0..=self.content.1).contains(&t)
    }

    pub fn is_style_plus(&self, t: Token) -> bool {
        (self.style_plus.0..=self.style_plus.1).contains(&t)
    }

    pub fn is_style_minus(&self, t: Token) -> bool {
        (self.style_minus.0..=self.style_minus.1).contains(&t)
    }
}

/// Architecture and layout configuration.
///
/// `response_len` is the response budget `N`; a context is always
/// `[BOS, prompt, SEP, response]` and therefore `prompt_len + 2 +
/// response_len` tokens long at most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: VocabSpec,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let prompt_len = 16;
        let response_len = 32;
        Self {
            vocab: VocabSpec::default(),
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_width: 256,
            prompt_len,
            response_len,
            max_context: prompt_len + 2 + response_len,
        }
    }
}

impl ModelConfig {
    /// Small config helper for tests and gradient checks.
    pub fn micro(d_model: usize, heads: usize, layers: usize, prompt_len: usize, response_len: usize) -> Self {
        Self {
            vocab: VocabSpec::default(),
            d_model,
            heads,
            layers,
            ffn_width: d_model * 4,
            prompt_len,
            response_len,
            max_context: prompt_len + 2 + response_len,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.vocab.validate()?;
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_context < self.prompt_len + 2 + self.response_len {
            return Err(ModelError::InvalidArgument(format!(
                "max_context {} shorter than prompt + specials + response = {}",
                self.max_context,
                self.prompt_len + 2 + self.response_len
            )));
        }
        if self.layers == 0 || self.ffn_width == 0 || self.prompt_len == 0 || self.response_len == 0 {
            return Err(ModelError::InvalidArgument("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// Total parameter count, by the same shape arithmetic that drives
    /// initialization, flattening, and the checkpoint layout.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab.size;
        let f = self.ffn_width;
        let per_layer = 2 * (2 * d) // two layer norms (gain + bias)
            + 4 * d * d // wq, wk, wv, wo
            + d * f + f // ffn up + bias
            + f * d + d; // ffn down + bias
        v * d + self.max_context * d + self.layers * per_layer + 2 * d + d * v
    }
}

/// Weights of one transformer layer. Attention projections are bias-free;
/// the FFN carries biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: DenseArray,
    pub ln1_bias: DenseArray,
    pub wq: DenseArray,
    pub wk: DenseArray,
    pub wv: DenseArray,
    pub wo: DenseArray,
    pub ln2_gain: DenseArray,
    pub ln2_bias: DenseArray,
    pub ffn_up: DenseArray,
    pub ffn_up_bias: DenseArray,
    pub ffn_down: DenseArray,
    pub ffn_down_bias: DenseArray,
}

/// Full parameter set plus the config that determines every shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: DenseArray,
    pub positional_embedding: DenseArray,
    pub layers: Vec<LayerParams>,
    pub final_gain: DenseArray,
    pub final_bias: DenseArray,
    pub output_projection: DenseArray,
}

/// Canonical parameter order used by checkpoints, flat gradient buffers, and
/// the optimizer: embedding, positional, layers in index order with
/// attention before FFN, final norm, output projection.
impl ModelParams {
    pub fn arrays(&self) -> Vec<&DenseArray> {
        let mut out = vec![&self.token_embedding, &self.positional_embedding];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.ffn_up,
                &l.ffn_up_bias,
                &l.ffn_down,
                &l.ffn_down_bias,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias, &self.output_projection]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out: Vec<&mut DenseArray> =
            vec![&mut self.token_embedding, &mut self.positional_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ffn_up,
                &mut l.ffn_up_bias,
                &mut l.ffn_down,
                &mut l.ffn_down_bias,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.output_projection]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }
}

/// Deterministic initialization: normal weights with std 0.02, layer norm
/// gain 1 and bias 0, zero FFN biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("std is positive");
    let mut randn = |shape: Vec<usize>| {
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        DenseArray::new(shape, data).expect("shape/data agree")
    };
    let d = config.d_model;
    let v = config.vocab.size;
    let f = config.ffn_width;
    let token_embedding = randn(vec![v, d]);
    let positional_embedding = randn(vec![config.max_context, d]);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerParams {
            ln1_gain: DenseArray::new(vec![d], vec![1.0; d]).expect("gain"),
            ln1_bias: DenseArray::zeros(vec![d]),
            wq: randn(vec![d, d]),
            wk: randn(vec![d, d]),
            wv: randn(vec![d, d]),
            wo: randn(vec![d, d]),
            ln2_gain: DenseArray::new(vec![d], vec![1.0; d]).expect("gain"),
            ln2_bias: DenseArray::zeros(vec![d]),
            ffn_up: randn(vec![d, f]),
            ffn_up_bias: DenseArray::zeros(vec![f]),
            ffn_down: randn(vec![f, d]),
            ffn_down_bias: DenseArray::zeros(vec![d]),
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        positional_embedding,
        layers,
        final_gain: DenseArray::new(vec![d], vec![1.0; d]).expect("gain"),
        final_bias: DenseArray::zeros(vec![d]),
        output_projection: randn(vec![d, v]),
    })
}

/// Context layout `[BOS, x_1..x_m, SEP, y_1..y_N]` with the response region
/// right-padded with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLayout {
    pub tokens: TokenSeq,
    pub response_start: usize,
}

pub fn build_context(
    prompt: &[Token],
    draft: &[Token],
    config: &ModelConfig,
) -> Result<ContextLayout, ModelError> {
    if prompt.len() != config.prompt_len {
        return Err(ModelError::InvalidArgument(format!(
            "prompt length {} does not match configured {}",
            prompt.len(),
            config.prompt_len
        )));
    }
    if draft.len() > config.response_len {
        return Err(ModelError::InvalidArgument(format!(
            "draft length {} exceeds response budget {}",
            draft.len(),
            config.response_len
        )));
    }
    let mut tokens = Vec::with_capacity(config.prompt_len + 2 + config.response_len);
    tokens.push(BOS);
    tokens.extend_from_slice(prompt);
    tokens.push(SEP);
    tokens.extend_from_slice(draft);
    tokens.resize(config.prompt_len + 2 + config.response_len, PAD);
    Ok(ContextLayout { tokens, response_start: config.prompt_len + 2 })
}

/// Anything that maps a token prefix to one logits row per position.
/// Implemented by [`ModelParams`] and by the fixed-table models the decode
/// tests use.
pub trait SequenceModel {
    fn vocab_size(&self) -> usize;

    /// Logits for every position of `tokens`; row `p` scores the token at
    /// position `p + 1`. Must be strictly causal and deterministic.
    fn logits_rows(&self, tokens: &[Token]) -> DenseArray;
}

impl SequenceModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab.size
    }

    fn logits_rows(&self, tokens: &[Token]) -> DenseArray {
        forward_prefix(self, tokens).expect("callers bound context length by max_context")
    }
}

/// Forward pass over an arbitrary token prefix. Row `i` of the result
/// depends only on tokens at positions `<= i`.
pub fn forward_prefix(params: &ModelParams, tokens: &[Token]) -> Result<DenseArray, ModelError> {
    let cfg = &params.config;
    let t = tokens.len();
    if t == 0 || t > cfg.max_context {
        return Err(ModelError::InvalidArgument(format!(
            "context length {t} outside 1..={}",
            cfg.max_context
        )));
    }
    let d = cfg.d_model;
    let v = cfg.vocab.size;
    if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= v) {
        return Err(ModelError::InvalidArgument(format!("token {bad} outside vocabulary")));
    }

    // Token + positional embeddings.
    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = params.token_embedding.row(tok as usize);
        let pe = params.positional_embedding.row(i);
        let row = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut normed = vec![0.0; t * d];
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut val = vec![0.0; t * d];
    let mut attn = vec![0.0; t * d];
    let mut proj = vec![0.0; t * d];
    let mut hidden = vec![0.0; t * cfg.ffn_width];
    for layer in &params.layers {
        kernels::layer_norm_rows(&x, layer.ln1_gain.data(), layer.ln1_bias.data(), &mut normed, t, d);
        kernels::matmul_into(&normed, layer.wq.data(), &mut q, t, d, d);
        kernels::matmul_into(&normed, layer.wk.data(), &mut k, t, d, d);
        kernels::matmul_into(&normed, layer.wv.data(), &mut val, t, d, d);
        kernels::causal_attention_inference(&q, &k, &val, &mut attn, t, d, cfg.heads);
        kernels::matmul_into(&attn, layer.wo.data(), &mut proj, t, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        kernels::layer_norm_rows(&x, layer.ln2_gain.data(), layer.ln2_bias.data(), &mut normed, t, d);
        let f = cfg.ffn_width;
        kernels::matmul_into(&normed, layer.ffn_up.data(), &mut hidden, t, d, f);
        for i in 0..t {
            let row = &mut hidden[i * f..(i + 1) * f];
            for (h, &b) in row.iter_mut().zip(layer.ffn_up_bias.data()) {
                *h = kernels::gelu(*h + b);
            }
        }
        kernels::matmul_into(&hidden, layer.ffn_down.data(), &mut proj, t, f, d);
        for i in 0..t {
            let row = &mut proj[i * d..(i + 1) * d];
            for (p, &b) in row.iter_mut().zip(layer.ffn_down_bias.data()) {
                *p += b;
            }
        }
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }
    }

    kernels::layer_norm_rows(&x, params.final_gain.data(), params.final_bias.data(), &mut normed, t, d);
    let mut logits = DenseArray::zeros(vec![t, v]);
    kernels::matmul_into(&normed, params.output_projection.data(), logits.data_mut(), t, d, v);
    Ok(logits)
}

/// Logits over a full context layout. Strictly causal and deterministic.
pub fn forward_logits(params: &ModelParams, context: &ContextLayout) -> Result<DenseArray, ModelError> {
    forward_prefix(params, &context.tokens)
}
