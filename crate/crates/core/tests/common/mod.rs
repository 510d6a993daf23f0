#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use pvgf_core::data::vocab::Vocabulary;
use pvgf_core::decoder::DecoderConfig;
use pvgf_core::encoder::{BlockSpec, EncoderConfig};
use pvgf_core::model::{CaptionModel, ModelConfig, TrainExample, Variant};
use pvgf_core::prompt::{PromptCatalog, PromptConfig};
use pvgf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_CAPTIONS: [(&str, &str); 3] = [
    ("a deity sits on a lotus", "deity"),
    ("a ghost dances", "ghost"),
    ("the deity rides a ghost", "deity"),
];

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_resolution: 8,
            stem_channels: 4,
            blocks: vec![
                BlockSpec { expansion: 1, out_channels: 4, stride: 1 },
                BlockSpec { expansion: 2, out_channels: 6, stride: 2 },
            ],
            head_channels: 8,
            freeze: false,
        },
        decoder: DecoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 32,
            ..DecoderConfig::default()
        },
        prompt: PromptConfig {
            num_vectors: 2,
            ..PromptConfig::default()
        },
        max_caption_len: 12,
    }
}

/// A small model plus examples with random images and mixed caption lengths.
pub fn tiny_model(variant: Variant, seed: u64) -> (CaptionModel, Vec<TrainExample>) {
    let catalog = PromptCatalog::new(
        vec!["deity".into(), "ghost".into()],
        vec!["a deity".into(), "a ghost".into()],
    )
    .unwrap();
    let config = tiny_config();
    let texts: Vec<&str> = TINY_CAPTIONS
        .iter()
        .map(|(c, _)| *c)
        .chain([config.prompt.template.as_str(), "a deity", "a ghost"])
        .collect();
    let vocab = Vocabulary::build(texts, 1).unwrap();
    let mut model = CaptionModel::new(config, variant, vocab, catalog, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    // zero biases put dead pixels exactly on the ReLU kink
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.names()[id.index()].ends_with("bias") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let examples = TINY_CAPTIONS
        .iter()
        .map(|(caption, cat)| {
            let data = (0..8 * 8 * 3).map(|_| rng.random::<f64>()).collect();
            let image = Tensor::new(vec![8, 8, 3], data).unwrap();
            model.example(image, caption, cat).unwrap()
        })
        .collect();
    (model, examples)
}
