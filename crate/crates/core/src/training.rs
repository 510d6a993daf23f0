//! Fusion loss, AdamW, step-decay schedule and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptionModel, TrainExample, Variant};
use crate::parallel::Execution;
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    /// Decoupled AdamW weight decay coefficient.
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PvgfDpc,
            batch_size: 8,
            learning_rate: 1e-5,
            lr_decay_factor: 0.8,
            lr_decay_every_epochs: 8,
            weight_decay: 0.01,
            alpha: 1.0,
            lambda: 1.0,
            epochs: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return fail(format!("alpha {} and lambda {} must be non-negative", self.alpha, self.lambda));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_every_epochs == 0 {
            return fail("lr_decay_every_epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0 || !c.is_finite()) {
            return fail("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Effective configuration for an ablation variant; every other
/// hyperparameter is shared.
pub fn ablation_variant(variant: Variant, config: &TrainConfig) -> Result<TrainConfig> {
    let mut c = config.clone();
    c.variant = variant;
    match variant {
        Variant::Dbc => c.lambda = 0.0,
        Variant::VgfDpc | Variant::PvgfDpc => {
            if c.lambda <= 0.0 {
                return Err(Error::Config(format!("{} requires lambda > 0", variant.name())));
            }
        }
    }
    c.validate()?;
    Ok(c)
}

/// `alpha * text + lambda * prompt` on the tape.
pub fn fusion_loss(tape: &mut Tape<'_>, text: Var, prompt: Var, alpha: f64, lambda: f64) -> Result<Var> {
    let a = tape.scale(text, alpha);
    let b = tape.scale(prompt, lambda);
    tape.add(a, b)
}

/// Learning rate for a 1-based epoch under the step-decay schedule. The
/// product is rounded to 12 significant digits so decimal schedules come out
/// exact (`1e-5 * 0.8` is `8e-6`, not `8.000000000000001e-6`).
pub fn lr_for_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch.max(1) - 1) / config.lr_decay_every_epochs;
    let raw = config.learning_rate * config.lr_decay_factor.powi(k as i32);
    if raw == 0.0 || !raw.is_finite() {
        return raw;
    }
    format!("{raw:.11e}").parse().expect("formatted float parses")
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// AdamW with decoupled weight decay and per-parameter step counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: Vec<u64>,
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            steps: vec![0; store.len()],
            m: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw", &[grads.len()], &[store.len()]));
        }
        for (i, (t, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !t.requires_grad {
                continue;
            }
            if g.len() != t.numel() {
                return Err(Error::dim("adamw", &[g.len()], &[t.numel()]));
            }
            self.steps[i] += 1;
            let n = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(n);
            let c2 = 1.0 - self.beta2.powi(n);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gj), mj), vj) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let update = (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
                *p = *p - lr * self.weight_decay * *p - lr * update;
            }
        }
        Ok(())
    }
}

/// Mean loss components for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub text: f64,
    pub prompt: f64,
    pub fusion: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,L_text,L_prompt,L_fusion,lr";

pub fn loss_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.text, l.prompt, l.fusion, l.lr));
    }
    s
}

pub fn write_loss_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(logs).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CaptionModel,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: CaptionModel, config: &TrainConfig, seed: u64) -> Self {
        let optimizer = AdamW::new(&model.params, config);
        Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub text: f64,
    pub prompt: f64,
    pub fusion: f64,
}

/// One forward/backward/update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainExample],
    config: &TrainConfig,
    lr: f64,
    exec: Execution,
) -> Result<StepLoss> {
    let mut out = state.model.batch_gradients(batch, config.alpha, config.lambda, exec)?;
    let divergence = |component| Error::Divergence {
        component,
        epoch: state.epoch + 1,
        step: state.step as usize + 1,
    };
    for (name, v) in [("text", out.text), ("prompt", out.prompt), ("fusion", out.fusion)] {
        if !v.is_finite() {
            return Err(divergence(name));
        }
    }
    if out.grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
        return Err(divergence("gradient"));
    }
    if let Some(c) = config.clip_norm {
        clip_global_norm(&mut out.grads, c);
    }
    state.optimizer.step(&mut state.model.params, &out.grads, lr)?;
    state.step += 1;
    Ok(StepLoss {
        text: out.text,
        prompt: out.prompt,
        fusion: out.fusion,
    })
}

/// Runs epochs `state.epoch + 1 ..= config.epochs`. After each epoch
/// `on_epoch` sees the state and log; returning `false` stops early.
pub fn train<F>(
    state: &mut TrainState,
    examples: &[TrainExample],
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&TrainState, &EpochLog) -> Result<bool>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let lr = lr_for_epoch(config, epoch);
        order.sort_unstable();
        if config.shuffle {
            order.shuffle(&mut state.rng);
        }
        let (mut text, mut prompt, mut fusion) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let s = train_step(state, &batch, config, lr, exec)?;
            let w = chunk.len() as f64 / examples.len() as f64;
            text += s.text * w;
            prompt += s.prompt * w;
            fusion += s.fusion * w;
        }
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            text,
            prompt,
            fusion,
            lr,
        };
        log::info!(
            "epoch {epoch}: L_text {text:.6} L_prompt {prompt:.6} L_fusion {fusion:.6} lr {lr:e}"
        );
        logs.push(log);
        if !on_epoch(state, &log)? {
            break;
        }
    }
    Ok(logs)
}
