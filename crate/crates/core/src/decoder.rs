//! Transformer decoder whose layer normalizations receive the projected image
//! feature, plus the text loss and greedy decoding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{glorot, Binder, ParamId, ParamStore};
use crate::prompt::argmax;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPlacement {
    #[default]
    Prefix,
    Suffix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Filled from the vocabulary when the model is built.
    pub vocab_size: usize,
    /// Filled from the encoder head width when the model is built.
    pub feature_dim: usize,
    pub ln_eps: f64,
    pub prompt_placement: PromptPlacement,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 128,
            vocab_size: 0,
            feature_dim: 0,
            ln_eps: 1e-5,
            prompt_placement: PromptPlacement::Prefix,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        if self.ffn_dim == 0 || self.vocab_size <= EOS || self.feature_dim == 0 {
            return Err(Error::Config("decoder ffn_dim, vocab_size and feature_dim must be set".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub feature_w: ParamId,
    pub feature_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub output_w: ParamId,
    pub output_b: ParamId,
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), glorot(rng, &[fan_in, fan_out], fan_in, fan_out));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    (w, b)
}

/// `[T, T]` additive mask with `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

impl Decoder {
    pub fn new(config: DecoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.model_dim, config.ffn_dim);
        let token_embedding = store.add("decoder.token_embedding", glorot(rng, &[v, d], v, d));
        let position_embedding = store.add(
            "decoder.position_embedding",
            glorot(rng, &[config.max_seq_len, d], config.max_seq_len, d),
        );
        let (feature_w, feature_b) = linear(store, rng, "decoder.feature_proj", config.feature_dim, d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("decoder.layer{l}");
            let (wq, bq) = linear(store, rng, &format!("{p}.attn.q"), d, d);
            let (wk, bk) = linear(store, rng, &format!("{p}.attn.k"), d, d);
            let (wv, bv) = linear(store, rng, &format!("{p}.attn.v"), d, d);
            let (wo, bo) = linear(store, rng, &format!("{p}.attn.out"), d, d);
            let ln1_gamma = store.add(format!("{p}.ln1.gamma"), Tensor::full(&[d], 1.0));
            let ln1_beta = store.add(format!("{p}.ln1.beta"), Tensor::zeros(&[d]));
            let (ff1_w, ff1_b) = linear(store, rng, &format!("{p}.ffn.in"), d, f);
            let (ff2_w, ff2_b) = linear(store, rng, &format!("{p}.ffn.out"), f, d);
            let ln2_gamma = store.add(format!("{p}.ln2.gamma"), Tensor::full(&[d], 1.0));
            let ln2_beta = store.add(format!("{p}.ln2.beta"), Tensor::zeros(&[d]));
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gamma,
                ln1_beta,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                ln2_gamma,
                ln2_beta,
            });
        }
        let (output_w, output_b) = linear(store, rng, "decoder.output", d, v);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            feature_w,
            feature_b,
            layers,
            output_w,
            output_b,
        })
    }

    fn affine<'p>(tape: &mut Tape<'p>, binder: &mut Binder<'p>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = binder.var(tape, w);
        let b = binder.var(tape, b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Projects the `[feature_dim]` image feature to the `[model_dim]` vector
    /// injected into every layer.
    pub fn project_feature<'p>(&self, tape: &mut Tape<'p>, binder: &mut Binder<'p>, feature: Var) -> Result<Var> {
        let fd = self.config.feature_dim;
        if tape.shape(feature) != [fd] {
            return Err(Error::dim("project_feature", tape.shape(feature), &[fd]));
        }
        let x = tape.reshape(feature, &[1, fd])?;
        let y = Self::affine(tape, binder, x, self.feature_w, self.feature_b)?;
        tape.reshape(y, &[self.config.model_dim])
    }

    /// Scaled dot-product attention per head, heads concatenated and projected.
    /// `mask` is an additive `[T, T]` constant (or `None` for full attention).
    pub fn multi_head_attention<'p>(
        &self,
        tape: &mut Tape<'p>,
        binder: &mut Binder<'p>,
        x: Var,
        mask: Option<Var>,
        layer: &LayerParams,
    ) -> Result<Var> {
        let t = tape.shape(x)[0];
        if t > self.config.max_seq_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let q = Self::affine(tape, binder, x, layer.wq, layer.bq)?;
        let k = Self::affine(tape, binder, x, layer.wk, layer.bk)?;
        let v = Self::affine(tape, binder, x, layer.wv, layer.bv)?;
        let heads = self.config.num_heads;
        let dk = self.config.model_dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk)?,
                    tape.slice_cols(k, h * dk, dk)?,
                    tape.slice_cols(v, h * dk, dk)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Self::affine(tape, binder, cat, layer.wo, layer.bo)
    }

    /// Attention and feed-forward sublayers, each followed by the injected
    /// layer normalization of `input + sublayer(input) + I`.
    pub fn coding_layer<'p>(
        &self,
        tape: &mut Tape<'p>,
        binder: &mut Binder<'p>,
        x: Var,
        injected: Var,
        mask: Option<Var>,
        layer: &LayerParams,
    ) -> Result<Var> {
        let eps = self.config.ln_eps;
        let attn = self.multi_head_attention(tape, binder, x, mask, layer)?;
        let (g1, b1) = (binder.var(tape, layer.ln1_gamma), binder.var(tape, layer.ln1_beta));
        let x1 = tape.layer_norm_injected(x, attn, injected, g1, b1, eps)?;
        let h = Self::affine(tape, binder, x1, layer.ff1_w, layer.ff1_b)?;
        let h = tape.relu(h);
        let ff = Self::affine(tape, binder, h, layer.ff2_w, layer.ff2_b)?;
        let (g2, b2) = (binder.var(tape, layer.ln2_gamma), binder.var(tape, layer.ln2_beta));
        tape.layer_norm_injected(x1, ff, injected, g2, b2, eps)
    }

    /// Logits `[T, vocab]` for the token sequence with the optional prompt
    /// embeddings placed according to the configured placement.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        binder: &mut Binder<'p>,
        prompt: Option<Var>,
        tokens: &[usize],
        feature: Var,
    ) -> Result<Var> {
        let p_len = prompt.map_or(0, |p| tape.shape(p)[0]);
        let total = p_len + tokens.len();
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        if tokens.is_empty() && prompt.is_none() {
            return Err(Error::dim("decoder forward", &[0], &[self.config.max_seq_len]));
        }
        let table = binder.var(tape, self.token_embedding);
        let mut parts = Vec::with_capacity(2);
        let embedded = if tokens.is_empty() {
            None
        } else {
            Some(tape.embedding(table, tokens)?)
        };
        match self.config.prompt_placement {
            PromptPlacement::Prefix => parts.extend(prompt.into_iter().chain(embedded)),
            PromptPlacement::Suffix => parts.extend(embedded.into_iter().chain(prompt)),
        }
        let seq = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let positions: Vec<usize> = (0..total).collect();
        let pos_table = binder.var(tape, self.position_embedding);
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(seq, pos)?;
        let injected = self.project_feature(tape, binder, feature)?;
        let mask = tape.constant(&[total, total], causal_mask(total))?;
        for layer in &self.layers {
            x = self.coding_layer(tape, binder, x, injected, Some(mask), layer)?;
        }
        Self::affine(tape, binder, x, self.output_w, self.output_b)
    }

    /// Decoder input tokens and aligned targets for a framed caption
    /// (`BOS .. EOS`, trailing PAD allowed). Prompt rows are never supervised.
    pub fn teacher_forcing(&self, caption_ids: &[usize], prompt_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let end = caption_ids
            .iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| Error::Config("caption ids lack EOS".into()))?;
        if caption_ids.first() != Some(&BOS) {
            return Err(Error::Config("caption ids must start with BOS".into()));
        }
        let inputs = caption_ids[..end].to_vec();
        let caption_targets = caption_ids[1..=end].to_vec();
        let targets = match self.config.prompt_placement {
            PromptPlacement::Prefix => std::iter::repeat_n(PAD, prompt_len).chain(caption_targets).collect(),
            PromptPlacement::Suffix => caption_targets.into_iter().chain(std::iter::repeat_n(PAD, prompt_len)).collect(),
        };
        Ok((inputs, targets))
    }

    /// Greedy decoding from BOS. Returns generated ids without BOS or EOS.
    pub fn generate(
        &self,
        store: &ParamStore,
        feature: &Tensor,
        prompt: Option<&Tensor>,
        max_new_tokens: usize,
    ) -> Result<Vec<usize>> {
        if max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        let visible_prompt = match self.config.prompt_placement {
            PromptPlacement::Prefix => prompt,
            // a suffix prompt sits after the caption and is never visible to it
            PromptPlacement::Suffix => None,
        };
        let p_len = visible_prompt.map_or(0, |p| p.shape()[0]);
        let v = self.config.vocab_size;
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_new_tokens && p_len + tokens.len() <= self.config.max_seq_len {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let f = tape.frozen(feature);
            let p = visible_prompt.map(|p| tape.frozen(p));
            let logits = self.forward(&mut tape, &mut binder, p, &tokens, f)?;
            let values = tape.value(logits);
            let next = argmax(&values[values.len() - v..]);
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Mean token negative log-likelihood; PAD targets are ignored.
pub fn text_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets, PAD)
}
