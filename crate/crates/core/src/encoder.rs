//! Inverted-residual convolutional encoder producing the image feature vector.
//!
//! stem 3x3/2 conv -> inverted residual blocks -> 1x1 head conv -> global
//! average pooling. Every convolution carries a per-channel bias and there is
//! no normalization inside the blocks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot, Binder, ParamId, ParamStore};
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub head_channels: usize,
    /// Keep encoder weights fixed during caption training.
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_resolution: 32,
            stem_channels: 16,
            blocks: vec![
                BlockSpec { expansion: 1, out_channels: 16, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 24, stride: 2 },
                BlockSpec { expansion: 4, out_channels: 24, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 32, stride: 2 },
            ],
            head_channels: 64,
            freeze: false,
        }
    }
}

impl EncoderConfig {
    /// 299px input, 32-channel stem, the 16 expanding MobileNetV2 bottlenecks, 1280 head.
    pub fn full_scale() -> Self {
        let table: [(usize, usize, usize, usize); 6] = [
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let mut blocks = Vec::new();
        for (t, c, n, s) in table {
            for i in 0..n {
                blocks.push(BlockSpec {
                    expansion: t,
                    out_channels: c,
                    stride: if i == 0 { s } else { 1 },
                });
            }
        }
        Self {
            input_resolution: 299,
            stem_channels: 32,
            blocks,
            head_channels: 1280,
            freeze: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.expansion < 1 {
                return Err(Error::Config(format!("block {i}: expansion factor must be >= 1")));
            }
            if !matches!(b.stride, 1 | 2) {
                return Err(Error::Config(format!("block {i}: stride must be 1 or 2, got {}", b.stride)));
            }
            if b.out_channels == 0 {
                return Err(Error::Config(format!("block {i}: out_channels must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub spec: BlockSpec,
    pub in_channels: usize,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub depthwise_w: ParamId,
    pub depthwise_b: ParamId,
    pub project_w: ParamId,
    pub project_b: ParamId,
}

impl BlockParams {
    fn hidden(&self) -> usize {
        self.in_channels * self.spec.expansion
    }

    pub fn has_skip(&self) -> bool {
        self.spec.stride == 1 && self.in_channels == self.spec.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

fn conv_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, k: usize, cin: usize, cout: usize) -> ParamId {
    store.add(name, glorot(rng, &[k, k, cin, cout], k * k * cin, k * k * cout))
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let stem_w = conv_param(store, rng, "encoder.stem.weight".into(), 3, 3, config.stem_channels);
        let stem_b = store.add("encoder.stem.bias", Tensor::zeros(&[config.stem_channels]));
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = config.stem_channels;
        for (i, &spec) in config.blocks.iter().enumerate() {
            let hidden = cin * spec.expansion;
            let p = format!("encoder.block{i}");
            let expand_w = conv_param(store, rng, format!("{p}.expand.weight"), 1, cin, hidden);
            let expand_b = store.add(format!("{p}.expand.bias"), Tensor::zeros(&[hidden]));
            let depthwise_w = store.add(format!("{p}.depthwise.weight"), glorot(rng, &[3, 3, hidden], 9, 9));
            let depthwise_b = store.add(format!("{p}.depthwise.bias"), Tensor::zeros(&[hidden]));
            let project_w = conv_param(store, rng, format!("{p}.project.weight"), 1, hidden, spec.out_channels);
            let project_b = store.add(format!("{p}.project.bias"), Tensor::zeros(&[spec.out_channels]));
            blocks.push(BlockParams {
                spec,
                in_channels: cin,
                expand_w,
                expand_b,
                depthwise_w,
                depthwise_b,
                project_w,
                project_b,
            });
            cin = spec.out_channels;
        }
        let head_w = conv_param(store, rng, "encoder.head.weight".into(), 1, cin, config.head_channels);
        let head_b = store.add("encoder.head.bias", Tensor::zeros(&[config.head_channels]));
        Ok(Self {
            config,
            stem_w,
            stem_b,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Encodes an `[R, R, 3]` image into a `[head_channels]` feature vector.
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, binder: &mut Binder<'p>, image: Var) -> Result<Var> {
        let r = self.config.input_resolution;
        if tape.shape(image) != [r, r, 3] {
            return Err(Error::dim("encode", tape.shape(image), &[r, r, 3]));
        }
        let w = binder.var(tape, self.stem_w);
        let b = binder.var(tape, self.stem_b);
        let x = tape.conv2d(image, w, 2, Padding::Same)?;
        let x = tape.add_bias(x, b)?;
        let mut x = tape.relu(x);
        for block in &self.blocks {
            x = inverted_residual_block(tape, binder, x, block)?;
        }
        let w = binder.var(tape, self.head_w);
        let b = binder.var(tape, self.head_b);
        let x = tape.conv2d(x, w, 1, Padding::Same)?;
        let x = tape.add_bias(x, b)?;
        let x = tape.relu(x);
        tape.global_avg_pool(x)
    }
}

/// 1x1 expansion (+ReLU) -> 3x3 depthwise (+ReLU) -> 1x1 linear projection,
/// with an identity skip when the block keeps both stride and width.
pub fn inverted_residual_block<'p>(
    tape: &mut Tape<'p>,
    binder: &mut Binder<'p>,
    x: Var,
    block: &BlockParams,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != block.in_channels {
        return Err(Error::dim("inverted_residual_block", s, &[block.in_channels]));
    }
    debug_assert_eq!(block.hidden(), block.in_channels * block.spec.expansion);
    let (w, b) = (binder.var(tape, block.expand_w), binder.var(tape, block.expand_b));
    let h = tape.conv2d(x, w, 1, Padding::Same)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.relu(h);
    let (w, b) = (binder.var(tape, block.depthwise_w), binder.var(tape, block.depthwise_b));
    let h = tape.depthwise_conv2d(h, w, block.spec.stride, Padding::Same)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.relu(h);
    let (w, b) = (binder.var(tape, block.project_w), binder.var(tape, block.project_b));
    let h = tape.conv2d(h, w, 1, Padding::Same)?;
    let h = tape.add_bias(h, b)?;
    if block.has_skip() {
        tape.add(h, x)
    } else {
        Ok(h)
    }
}
