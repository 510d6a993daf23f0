//! Binary checkpoint: magic, version, JSON header, then named little-endian
//! f64 blocks in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, Variant};
use crate::prompt::PromptCatalog;
use crate::tensor::Tensor;
use crate::training::{AdamW, EpochLog, TrainState};

pub const MAGIC: &[u8; 8] = b"PVGFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: RunConfig,
    pub variant: Variant,
    pub model_seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub vocab: Vocabulary,
    pub catalog: PromptCatalog,
    pub adam_steps: Vec<u64>,
    /// Loss log of every completed epoch.
    pub history: Vec<EpochLog>,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub blocks: Vec<Tensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Captures model parameters and both AdamW moments.
    pub fn capture(state: &TrainState, config: &RunConfig, model_seed: u64, history: &[EpochLog]) -> Self {
        let model = &state.model;
        let mut infos = Vec::new();
        let mut blocks = Vec::new();
        for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
            infos.push(BlockInfo {
                name: format!("param/{name}"),
                shape: t.shape().to_vec(),
            });
            blocks.push(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("parameter shape"));
        }
        for (kind, moments) in [("adam_m", &state.optimizer.m), ("adam_v", &state.optimizer.v)] {
            for ((name, t), m) in model.params.names().iter().zip(model.params.tensors()).zip(moments) {
                infos.push(BlockInfo {
                    name: format!("{kind}/{name}"),
                    shape: t.shape().to_vec(),
                });
                blocks.push(Tensor::new(t.shape().to_vec(), m.clone()).expect("moment matches parameter"));
            }
        }
        Self {
            header: Header {
                config: config.clone(),
                variant: model.variant,
                model_seed,
                epoch: state.epoch,
                step: state.step,
                rng: RngState {
                    seed: state.rng_seed,
                    word_pos: state.rng.get_word_pos().to_string(),
                },
                vocab: model.vocab.clone(),
                catalog: model.catalog.clone(),
                adam_steps: state.optimizer.steps.clone(),
                history: history.to_vec(),
                blocks: infos,
            },
            blocks,
        }
    }

    /// Rebuilds the model, optimizer and RNG exactly as captured.
    pub fn restore(&self) -> Result<TrainState> {
        let h = &self.header;
        let mut model = CaptionModel::new(
            h.config.model.clone(),
            h.variant,
            h.vocab.clone(),
            h.catalog.clone(),
            h.model_seed,
        )?;
        let n = model.params.len();
        if self.blocks.len() != 3 * n {
            return Err(corrupt(format!("expected {} blocks, found {}", 3 * n, self.blocks.len())));
        }
        for (i, (info, block)) in h.blocks.iter().zip(&self.blocks).enumerate() {
            let (kind, idx) = (i / n, i % n);
            let expected = format!("{}/{}", ["param", "adam_m", "adam_v"][kind], model.params.names()[idx]);
            let shape = model.params.tensors()[idx].shape();
            if info.name != expected || block.shape() != shape {
                return Err(corrupt(format!("block {i} is {} {:?}, expected {expected} {shape:?}", info.name, block.shape())));
            }
        }
        let mut optimizer = AdamW::new(&model.params, &h.config.train);
        if h.adam_steps.len() != n {
            return Err(corrupt("optimizer step table has the wrong length"));
        }
        optimizer.steps = h.adam_steps.clone();
        for idx in 0..n {
            model.params.tensors_mut()[idx]
                .data_mut()
                .copy_from_slice(self.blocks[idx].data());
            optimizer.m[idx] = self.blocks[n + idx].data().to_vec();
            optimizer.v[idx] = self.blocks[2 * n + idx].data().to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.rng.seed);
        rng.set_word_pos(h.rng.word_pos.parse().map_err(|_| corrupt("bad rng word position"))?);
        Ok(TrainState {
            model,
            optimizer,
            epoch: h.epoch,
            step: h.step,
            rng_seed: h.rng.seed,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.blocks.len() != self.blocks.len() {
            return Err(corrupt("header and block counts differ"));
        }
        let header = serde_json::to_vec(&self.header)?;
        let body: usize = self.blocks.iter().map(|b| b.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for v in b.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut pos = body_start;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for info in &header.blocks {
            let n: usize = info.shape.iter().product();
            let end = pos.checked_add(n * 8).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt(format!("truncated block {}", info.name)))?;
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Tensor::new(info.shape.clone(), data).map_err(|_| corrupt(format!("bad shape for {}", info.name)))?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after last block"));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{BlockSpec, EncoderConfig};

    fn state() -> (TrainState, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.model.encoder = EncoderConfig {
            input_resolution: 8,
            stem_channels: 4,
            blocks: vec![BlockSpec {
                expansion: 2,
                out_channels: 4,
                stride: 1,
            }],
            head_channels: 6,
            freeze: false,
        };
        cfg.model.decoder.model_dim = 8;
        cfg.model.decoder.num_heads = 2;
        cfg.model.decoder.num_layers = 1;
        let vocab = Vocabulary::build(["a deity", "a ghost"], 1).unwrap();
        let catalog = PromptCatalog::from_labels(vec!["deity".into(), "ghost".into()]).unwrap();
        let model = CaptionModel::new(cfg.model.clone(), Variant::PvgfDpc, vocab, catalog, 5).unwrap();
        let mut st = TrainState::new(model, &cfg.train, 11);
        st.optimizer.m[0][0] = 0.125;
        st.optimizer.steps[0] = 3;
        st.epoch = 2;
        rand::Rng::random::<u64>(&mut st.rng);
        (st, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (st, cfg) = state();
        let ck = Checkpoint::capture(&st, &cfg, 5, &[]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.restore().unwrap();
        assert_eq!(restored.model.params.tensors(), st.model.params.tensors());
        assert_eq!(restored.optimizer, st.optimizer);
        assert_eq!(restored.optimizer.m, st.optimizer.m);
        assert_eq!(restored.rng, st.rng);
        assert_eq!(restored.epoch, 2);
    }

    #[test]
    fn corruption_is_detected() {
        let (st, cfg) = state();
        let bytes = Checkpoint::capture(&st, &cfg, 5, &[]).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
