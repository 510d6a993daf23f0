//! End-to-end flows shared by the command line and the integration tests:
//! dataset loading, training with checkpoints, captioning, scoring, ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::image_io::load_at;
use crate::data::manifest::load_manifest;
use crate::data::vocab::Vocabulary;
use crate::data::{derive_seed, split_dataset, CaptionSample, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, ScoredPair};
use crate::model::{CaptionModel, CaptionOutput, TrainExample, Variant};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;
use crate::training::{ablation_variant, train, write_loss_csv, EpochLog, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn dataset_from_config(config: &RunConfig) -> Result<Dataset> {
    let path = config
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    load_manifest(path)
}

/// Vocabulary over the given captions plus the prompt template and label texts.
pub fn build_vocab(config: &RunConfig, dataset: &Dataset, indices: &[usize]) -> Result<Vocabulary> {
    let mut texts: Vec<&str> = indices.iter().map(|&i| dataset.samples[i].caption.as_str()).collect();
    texts.push(&config.model.prompt.template);
    texts.extend(dataset.catalog.texts.iter().map(String::as_str));
    Vocabulary::build(texts, config.data.min_count)
}

pub fn load_images(dataset: &Dataset, indices: &[usize], config: &RunConfig, exec: Execution) -> Result<Vec<Tensor>> {
    let res = config.model.encoder.input_resolution;
    map_indexed(indices, exec, |_, &i| load_at(&dataset.root.join(&dataset.samples[i].image), res, config.data.resize))
        .into_iter()
        .collect()
}

/// Model-ready examples for `indices`.
pub fn examples(model: &CaptionModel, dataset: &Dataset, indices: &[usize], config: &RunConfig, exec: Execution) -> Result<Vec<TrainExample>> {
    let images = load_images(dataset, indices, config, exec)?;
    indices
        .iter()
        .zip(images)
        .map(|(&i, img)| {
            let s = &dataset.samples[i];
            model.example(img, &s.caption, &s.category)
        })
        .collect()
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub split: Split,
}

fn shuffle_seed(seed: u64) -> u64 {
    derive_seed(seed, 1, 0)
}

/// Fresh training state for `config` on the training split of `dataset`.
pub fn initial_state(config: &RunConfig, dataset: &Dataset) -> Result<(TrainState, Split)> {
    config.validate()?;
    let split = split_dataset(&dataset.samples, config.seed);
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocab = build_vocab(config, dataset, &split.train)?;
    let model = CaptionModel::new(config.model.clone(), config.train.variant, vocab, dataset.catalog.clone(), config.seed)?;
    log::info!(
        "{}: {} parameters, prompt module: {}",
        model.variant,
        model.params.count(),
        if model.prompt.is_some() { "enabled" } else { "disabled" }
    );
    Ok((TrainState::new(model, &config.train, shuffle_seed(config.seed)), split))
}

/// Trains on the training split, writing `checkpoint.bin`, `loss.csv` and
/// `config.json` into `out_dir` after every epoch. With `resume`, training
/// continues from that checkpoint's state and history; the config may differ
/// from the saved one only in `train.epochs`.
pub fn run_training(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
    exec: Execution,
) -> Result<TrainOutcome> {
    let split = split_dataset(&dataset.samples, config.seed);
    let (mut state, mut history) = match resume {
        Some(ck) => {
            let mut saved = ck.header.config.clone();
            saved.train.epochs = config.train.epochs;
            if saved != *config {
                return Err(Error::Config(
                    "resume checkpoint was written with a different config (only train.epochs may change)".into(),
                ));
            }
            (ck.restore()?, ck.header.history.clone())
        }
        None => (initial_state(config, dataset)?.0, Vec::new()),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_flat_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let exs = examples(&state.model, dataset, &split.train, config, exec)?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let csv_path = out_dir.join(LOSS_FILE);
    train(&mut state, &exs, &config.train, exec, |st, log| {
        history.push(*log);
        Checkpoint::capture(st, config, config.seed, &history).save(&ck_path)?;
        write_loss_csv(&csv_path, &history)?;
        Ok(true)
    })?;
    if history.is_empty() {
        Checkpoint::capture(&state, config, config.seed, &history).save(&ck_path)?;
        write_loss_csv(&csv_path, &history)?;
    }
    Ok(TrainOutcome { state, history, split })
}

/// One line of caption output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    #[serde(flatten)]
    pub output: CaptionOutput,
}

pub fn path_key(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Captions each distinct image among `indices` once, in first-seen order.
pub fn caption_samples(model: &CaptionModel, dataset: &Dataset, indices: &[usize], config: &RunConfig, exec: Execution) -> Result<Vec<CaptionRecord>> {
    let mut seen = BTreeMap::new();
    let unique: Vec<usize> = indices.iter().copied().filter(|&i| seen.insert(&dataset.samples[i].image, ()).is_none()).collect();
    let images = load_images(dataset, &unique, config, exec)?;
    let outputs = model.caption_all(&images, exec)?;
    Ok(unique
        .iter()
        .zip(outputs)
        .map(|(&i, output)| CaptionRecord {
            image: path_key(&dataset.samples[i].image),
            output,
        })
        .collect())
}

pub fn caption_files(model: &CaptionModel, paths: &[PathBuf], resize: bool, exec: Execution) -> Result<Vec<CaptionRecord>> {
    let res = model.config.encoder.input_resolution;
    let images: Vec<Tensor> = map_indexed(paths, exec, |_, p| load_at(p, res, resize)).into_iter().collect::<Result<_>>()?;
    Ok(paths
        .iter()
        .zip(model.caption_all(&images, exec)?)
        .map(|(p, output)| CaptionRecord {
            image: path_key(p),
            output,
        })
        .collect())
}

pub fn records_jsonl(records: &[CaptionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Pairs each captioned image with every reference caption for that image.
pub fn scored_pairs(records: &[CaptionRecord], references: &[CaptionSample]) -> Result<Vec<ScoredPair>> {
    let mut refs: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for s in references {
        refs.entry(path_key(&s.image)).or_default().push(&s.caption);
    }
    records
        .iter()
        .map(|r| {
            let rs = refs
                .get(&r.image)
                .ok_or_else(|| Error::Config(format!("no reference caption for {}", r.image)))?;
            ScoredPair::new(r.image.clone(), &r.output.caption, rs)
        })
        .collect()
}

/// Held-out evaluation indices: the test split, falling back to validation
/// and then training when the corpus is too small to have one.
pub fn holdout(split: &Split) -> &[usize] {
    [&split.test, &split.val, &split.train]
        .into_iter()
        .find(|s| !s.is_empty())
        .map_or(&[], |s| s.as_slice())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config_sha256: String,
    pub seed: u64,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<(&str, &MetricReport)> = self.rows.iter().map(|r| (r.variant.name(), &r.report)).collect();
        format!(
            "{}\nconfig sha256: {}\nseed: {}\n",
            MetricReport::table(&rows).trim_end(),
            self.config_sha256,
            self.seed
        )
    }
}

/// Trains and evaluates the three variants under one config and seed.
pub fn run_ablation(config: &RunConfig, dataset: &Dataset, out_dir: &Path, exec: Execution) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = config.clone();
        cfg.train = ablation_variant(variant, &config.train)?;
        log::info!("ablation: training {variant}");
        let outcome = run_training(&cfg, dataset, &out_dir.join(variant.key()), None, exec)?;
        let eval_idx = holdout(&outcome.split);
        let records = caption_samples(&outcome.state.model, dataset, eval_idx, &cfg, exec)?;
        let refs: Vec<CaptionSample> = eval_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
        let pairs = scored_pairs(&records, &refs)?;
        rows.push(AblationRow {
            variant,
            parameters: outcome.state.model.params.count(),
            report: evaluate(&pairs, &config.metrics, exec),
        });
    }
    Ok(AblationReport {
        rows,
        config_sha256: config.sha256(),
        seed: config.seed,
    })
}
