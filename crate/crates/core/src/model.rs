//! Full captioning model: encoder, optional prompt module, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocabulary, EOS};
use crate::decoder::{text_loss, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::params::{Binder, ParamStore};
use crate::prompt::{argmax, prompt_loss, render_prompt, PromptCatalog, PromptConfig, PromptModule};
use crate::tensor::{Tape, Tensor, Var};

/// The three ablation configurations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain encoder-decoder, text loss only.
    #[serde(rename = "dbc")]
    Dbc,
    /// Fusion loss with the classifier, no prompt fed to the decoder.
    #[serde(rename = "vgf")]
    VgfDpc,
    /// Classifier, prompt conditioning and fusion loss.
    #[default]
    #[serde(rename = "pvgf")]
    PvgfDpc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dbc, Variant::VgfDpc, Variant::PvgfDpc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dbc => "DBC",
            Variant::VgfDpc => "VGF-DPC",
            Variant::PvgfDpc => "PVGF-DPC",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Dbc => "dbc",
            Variant::VgfDpc => "vgf",
            Variant::PvgfDpc => "pvgf",
        }
    }

    pub fn has_classifier(self) -> bool {
        self != Variant::Dbc
    }

    pub fn feeds_prompt(self) -> bool {
        self == Variant::PvgfDpc
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbc" => Ok(Variant::Dbc),
            "vgf" | "vgf-dpc" => Ok(Variant::VgfDpc),
            "pvgf" | "pvgf-dpc" => Ok(Variant::PvgfDpc),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected dbc, vgf or pvgf)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub prompt: PromptConfig,
    /// Caption budget including BOS and EOS.
    pub max_caption_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            prompt: PromptConfig::default(),
            max_caption_len: 32,
        }
    }
}

/// One training example with the caption framed as `BOS .. EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image: Tensor,
    pub caption_ids: Vec<usize>,
    pub label: usize,
}

impl TrainExample {
    /// Number of supervised caption targets (tokens after BOS, EOS included).
    pub fn target_count(&self) -> usize {
        self.caption_ids.iter().position(|&t| t == EOS).unwrap_or(0)
    }
}

/// Per-sample loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    pub text: f64,
    pub prompt: f64,
    pub targets: usize,
}

/// Batch loss components and summed parameter gradients.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub text: f64,
    pub prompt: f64,
    pub fusion: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    /// Predicted category, absent for the classifier-free variant.
    pub category: Option<String>,
    /// Prompt text fed to the decoder, absent when no prompt is used.
    pub prompt: Option<String>,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prompt: Option<PromptModule>,
    pub vocab: Vocabulary,
    pub catalog: PromptCatalog,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, variant: Variant, vocab: Vocabulary, catalog: PromptCatalog, seed: u64) -> Result<Self> {
        catalog.validate()?;
        if config.max_caption_len < 3 {
            return Err(Error::Config("max_caption_len must be at least 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let mut dec_cfg = config.decoder.clone();
        dec_cfg.vocab_size = vocab.len();
        dec_cfg.feature_dim = config.encoder.head_channels;
        let decoder = Decoder::new(dec_cfg, &mut params, &mut rng)?;
        let prompt = if variant.has_classifier() {
            Some(PromptModule::new(
                config.prompt.clone(),
                config.encoder.head_channels,
                config.decoder.model_dim,
                catalog.len(),
                variant.feeds_prompt(),
                &mut params,
                &mut rng,
            )?)
        } else {
            None
        };
        if config.encoder.freeze {
            params.set_trainable_prefix("encoder.", false);
        }
        let mut config = config;
        config.decoder = decoder.config.clone();
        Ok(Self {
            config,
            variant,
            params,
            encoder,
            decoder,
            prompt,
            vocab,
            catalog,
        })
    }

    /// Parameter count excluding the prompt module.
    pub fn base_parameter_count(&self) -> usize {
        self.params.count() - self.params.count_prefix("prompt.")
    }

    pub fn example(&self, image: Tensor, caption: &str, category: &str) -> Result<TrainExample> {
        let label = self
            .catalog
            .index_of(category)
            .ok_or_else(|| Error::Config(format!("category {category:?} not in catalog")))?;
        let mut caption_ids = self.vocab.encode_caption(caption, self.config.max_caption_len)?;
        let end = caption_ids.iter().position(|&t| t == EOS).expect("framed caption");
        caption_ids.truncate(end + 1);
        Ok(TrainExample { image, caption_ids, label })
    }

    /// Builds the per-sample graph; returns `(text CE, prompt NLL, targets)`.
    /// The prompt is built from the ground-truth label (teacher forcing).
    pub fn sample_graph<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        binder: &mut Binder<'p>,
        ex: &'p TrainExample,
    ) -> Result<(Var, Option<Var>, usize)> {
        let image = tape.frozen(&ex.image);
        let feature = self.encoder.encode(tape, binder, image)?;
        let mut nll = None;
        let mut prompt = None;
        if let Some(pm) = &self.prompt {
            let probs = pm.classify(tape, binder, feature)?;
            nll = Some(prompt_loss(tape, probs, &[ex.label])?);
            if self.variant.feeds_prompt() {
                prompt = Some(pm.build_prompt(tape, binder, ex.label, &self.catalog, &self.vocab, self.decoder.token_embedding)?);
            }
        }
        let p_len = prompt.map_or(0, |p| tape.shape(p)[0]);
        let (inputs, targets) = self.decoder.teacher_forcing(&ex.caption_ids, p_len)?;
        let logits = self.decoder.forward(tape, binder, prompt, &inputs, feature)?;
        let ce = text_loss(tape, logits, &targets)?;
        Ok((ce, nll, ex.target_count()))
    }

    /// Per-sample share of the batch fusion loss:
    /// `alpha * ce_i * n_i / N + lambda * nll_i / B`.
    fn sample_objective(
        &self,
        tape: &mut Tape<'_>,
        ce: Var,
        nll: Option<Var>,
        text_weight: f64,
        prompt_weight: f64,
    ) -> Result<Var> {
        let t = tape.scale(ce, text_weight);
        match nll {
            Some(n) => {
                let p = tape.scale(n, prompt_weight);
                tape.add(t, p)
            }
            None => Ok(t),
        }
    }

    fn weights(batch: &[&TrainExample], alpha: f64, lambda: f64) -> Result<(usize, Vec<(f64, f64)>)> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let total: usize = batch.iter().map(|e| e.target_count()).sum();
        if total == 0 {
            return Err(Error::DegenerateBatch("batch has no caption targets".into()));
        }
        let b = batch.len() as f64;
        Ok((
            total,
            batch
                .iter()
                .map(|e| (alpha * e.target_count() as f64 / total as f64, lambda / b))
                .collect(),
        ))
    }

    /// Loss components and gradients for a batch. Samples are processed
    /// independently and gradients summed in batch order.
    pub fn batch_gradients(&self, batch: &[&TrainExample], alpha: f64, lambda: f64, exec: Execution) -> Result<BatchGradients> {
        let (total, weights) = Self::weights(batch, alpha, lambda)?;
        let per_sample = map_indexed(batch, exec, |i, ex| -> Result<(SampleLoss, Vec<Option<Vec<f64>>>)> {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let (ce, nll, n) = self.sample_graph(&mut tape, &mut binder, ex)?;
            let (tw, pw) = weights[i];
            let obj = self.sample_objective(&mut tape, ce, nll, tw, pw)?;
            let mut g = tape.backward(obj)?;
            let loss = SampleLoss {
                text: tape.value(ce)[0],
                prompt: nll.map_or(0.0, |v| tape.value(v)[0]),
                targets: n,
            };
            Ok((loss, binder.gradients(&mut g)))
        });
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let (mut text, mut prompt) = (0.0, 0.0);
        for r in per_sample {
            let (loss, g) = r?;
            text += loss.text * loss.targets as f64 / total as f64;
            prompt += loss.prompt / batch.len() as f64;
            for (acc, gi) in grads.iter_mut().zip(g) {
                if let Some(gi) = gi {
                    match acc {
                        Some(a) => a.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => *acc = Some(gi),
                    }
                }
            }
        }
        Ok(BatchGradients {
            text,
            prompt,
            fusion: alpha * text + lambda * prompt,
            grads,
        })
    }

    /// Forward-only batch fusion loss, summed exactly as the gradients are.
    pub fn batch_objective(&self, batch: &[&TrainExample], alpha: f64, lambda: f64) -> Result<f64> {
        let (_, weights) = Self::weights(batch, alpha, lambda)?;
        let mut total = 0.0;
        for (ex, (tw, pw)) in batch.iter().zip(weights) {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let (ce, nll, _) = self.sample_graph(&mut tape, &mut binder, ex)?;
            let obj = self.sample_objective(&mut tape, ce, nll, tw, pw)?;
            total += tape.value(obj)[0];
        }
        Ok(total)
    }

    /// Category probabilities for one image, if the variant has a classifier.
    pub fn classify(&self, image: &Tensor) -> Result<Option<Vec<f64>>> {
        let Some(pm) = &self.prompt else { return Ok(None) };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let img = tape.frozen(image);
        let feature = self.encoder.encode(&mut tape, &mut binder, img)?;
        let probs = pm.classify(&mut tape, &mut binder, feature)?;
        Ok(Some(tape.value(probs).to_vec()))
    }

    /// Encode, classify, build the prompt from the prediction, greedy decode.
    pub fn caption(&self, image: &Tensor) -> Result<CaptionOutput> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let img = tape.frozen(image);
        let feature = self.encoder.encode(&mut tape, &mut binder, img)?;
        let mut category = None;
        let mut prompt = None;
        let mut prompt_text = None;
        if let Some(pm) = &self.prompt {
            let probs = pm.classify(&mut tape, &mut binder, feature)?;
            let label = argmax(tape.value(probs));
            category = Some(self.catalog.labels[label].clone());
            if self.variant.feeds_prompt() {
                let p = pm.build_prompt(&mut tape, &mut binder, label, &self.catalog, &self.vocab, self.decoder.token_embedding)?;
                prompt = Some(tape.to_tensor(p));
                prompt_text = Some(render_prompt(&pm.config.template, &self.catalog, label)?);
            }
        }
        let feature = tape.to_tensor(feature);
        let budget = self.config.max_caption_len.saturating_sub(2).max(1);
        let ids = self.decoder.generate(&self.params, &feature, prompt.as_ref(), budget)?;
        Ok(CaptionOutput {
            category,
            prompt: prompt_text,
            caption: self.vocab.decode(&ids),
        })
    }

    /// Captions several images, preserving order.
    pub fn caption_all(&self, images: &[Tensor], exec: Execution) -> Result<Vec<CaptionOutput>> {
        map_indexed(images, exec, |_, img| self.caption(img)).into_iter().collect()
    }
}
