use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use pvgf_core::checkpoint::Checkpoint;
use pvgf_core::config::RunConfig;
use pvgf_core::data::augment::expand_dataset;
use pvgf_core::data::manifest::load_manifest;
use pvgf_core::data::synth::generate_synthetic_corpus;
use pvgf_core::metrics::{evaluate, MetricReport, ScoredPair};
use pvgf_core::model::Variant;
use pvgf_core::parallel::Execution;
use pvgf_core::pipeline::{self, CHECKPOINT_FILE};

#[derive(Parser, Debug)]
#[command(name = "pvgf", version, about = "Prompt-guided image captioning: data, training, captioning and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON config file of dotted keys, e.g. {"train.epochs": 4}
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model variant: dbc, vgf or pvgf
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Number of decoder coding layers
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Output directory (defaults to `output_dir` from the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory
    #[arg(long, global = true)]
    force: bool,
    /// Config override `key=value`, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus with its manifest and catalog
    Synth,
    /// Expand a dataset with augmented copies
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        multiplier: Option<usize>,
    },
    /// Train a model; writes checkpoint.bin, loss.csv and config.json
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint (only train.epochs may differ)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Caption images with a trained checkpoint; writes captions.jsonl
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files to caption
        #[arg(long, conflicts_with = "manifest")]
        image: Vec<PathBuf>,
        /// Caption every distinct image of a manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resample images whose size differs from the checkpoint resolution
        #[arg(long)]
        resize: bool,
    },
    /// Score candidate captions; prints the metric table, writes metrics.json
    Eval {
        /// JSONL of {"image", "caption"}
        #[arg(long, requires = "references", conflicts_with = "pairs")]
        candidates: Option<PathBuf>,
        /// JSONL of {"image", "caption"}, several lines per image allowed
        #[arg(long, requires = "candidates")]
        references: Option<PathBuf>,
        /// JSONL of {"candidate", "references": [...], "image"?}
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Train and evaluate DBC, VGF-DPC and PVGF-DPC; writes ablation.txt and ablation.json
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PVGF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PVGF_THREADS={v:?} is not a thread count"))?;
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        #[cfg(not(feature = "parallel"))]
        log::info!("PVGF_THREADS={n} ignored: built without parallel support");
    }
    Ok(())
}

fn load_config(g: &Global, manifest: Option<&Path>) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(v) = &g.variant {
        let v: Variant = v.parse()?;
        overrides.push(format!("train.variant={}", v.key()));
    }
    if let Some(l) = g.layers {
        overrides.push(format!("model.decoder.num_layers={l}"));
    }
    if let Some(o) = &g.out {
        overrides.push(format!("output_dir={}", Value::String(o.display().to_string())));
    }
    if let Some(m) = manifest {
        overrides.push(format!("data.manifest={}", Value::String(m.display().to_string())));
    }
    Ok(RunConfig::load(g.config.as_deref(), &overrides)?)
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            bail!("output directory {} is not empty (use --force to overwrite)", dir.display());
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn category_counts<'a>(cats: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for c in cats {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1)))
        .collect()
}

fn str_field<'v>(v: &'v Value, key: &str, path: &Path) -> Result<&'v str> {
    v.get(key)
        .and_then(Value::as_str)
        .with_context(|| format!("{}: record lacks string field {key:?}", path.display()))
}

fn eval_pairs(candidates: Option<&Path>, references: Option<&Path>, pairs: Option<&Path>) -> Result<Vec<ScoredPair>> {
    if let Some(p) = pairs {
        let rows = read_jsonl(p)?;
        if rows.is_empty() {
            bail!("{} contains no pairs", p.display());
        }
        return rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cand = str_field(r, "candidate", p)?;
                let refs: Vec<&str> = r
                    .get("references")
                    .and_then(Value::as_array)
                    .with_context(|| format!("{}: pair {} lacks a references array", p.display(), i + 1))?
                    .iter()
                    .map(|v| v.as_str().context("reference is not a string"))
                    .collect::<Result<_>>()?;
                let id = r.get("image").and_then(Value::as_str).map_or_else(|| i.to_string(), str::to_string);
                Ok(ScoredPair::new(id, cand, &refs)?)
            })
            .collect();
    }
    let (Some(cp), Some(rp)) = (candidates, references) else {
        bail!("eval needs --candidates with --references, or --pairs");
    };
    let cands = read_jsonl(cp)?;
    if cands.is_empty() {
        bail!("candidate file {} is empty", cp.display());
    }
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in read_jsonl(rp)? {
        refs.entry(str_field(&r, "image", rp)?.to_string())
            .or_default()
            .push(str_field(&r, "caption", rp)?.to_string());
    }
    let mut cand_map: BTreeMap<String, String> = BTreeMap::new();
    for c in &cands {
        let id = str_field(c, "image", cp)?.to_string();
        if cand_map.insert(id.clone(), str_field(c, "caption", cp)?.to_string()).is_some() {
            bail!("duplicate candidate for image {id}");
        }
    }
    let cand_ids: BTreeSet<&String> = cand_map.keys().collect();
    let ref_ids: BTreeSet<&String> = refs.keys().collect();
    let missing_refs: Vec<&&String> = cand_ids.difference(&ref_ids).collect();
    let missing_cands: Vec<&&String> = ref_ids.difference(&cand_ids).collect();
    if !missing_refs.is_empty() || !missing_cands.is_empty() {
        bail!("unmatched ids: without references {missing_refs:?}; without candidates {missing_cands:?}");
    }
    cand_map
        .iter()
        .map(|(id, c)| {
            let rs: Vec<&str> = refs[id].iter().map(String::as_str).collect();
            Ok(ScoredPair::new(id.clone(), c, &rs)?)
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let exec = Execution::default();
    let g = &cli.global;
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(g, None)?;
            prepare_out(&cfg.output_dir, g.force)?;
            let ds = generate_synthetic_corpus(&cfg.synth, cfg.seed, &cfg.output_dir, exec)?;
            println!("wrote {} samples to {}", ds.samples.len(), cfg.output_dir.display());
            for (c, n) in category_counts(ds.samples.iter().map(|s| s.category.as_str())) {
                println!("  {c}: {n}");
            }
        }
        Command::Augment { manifest, multiplier } => {
            let mut cfg = load_config(g, manifest.as_deref())?;
            if let Some(m) = multiplier {
                cfg.augment.multiplier = *m;
            }
            let ds = pipeline::dataset_from_config(&cfg)?;
            cfg.augment.validate()?;
            prepare_out(&cfg.output_dir, g.force)?;
            let out = expand_dataset(&ds, &cfg.augment, cfg.seed, &cfg.output_dir, exec)?;
            println!(
                "multiplier {}: {} -> {} samples in {}",
                cfg.augment.multiplier,
                ds.samples.len(),
                out.samples.len(),
                cfg.output_dir.display()
            );
        }
        Command::Train { manifest, resume } => {
            let cfg = load_config(g, manifest.as_deref())?;
            log::info!("config sha256 {}", cfg.sha256());
            let ds = pipeline::dataset_from_config(&cfg)?;
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            if ck.is_none() {
                prepare_out(&cfg.output_dir, g.force)?;
            }
            let outcome = pipeline::run_training(&cfg, &ds, &cfg.output_dir, ck.as_ref(), exec)?;
            let model = &outcome.state.model;
            println!("variant: {}", model.variant);
            println!("prompt module: {}", if model.prompt.is_some() { "enabled" } else { "disabled" });
            println!("decoder layers: {}", model.decoder.config.num_layers);
            println!("parameters: {}", model.params.count());
            if let Some(last) = outcome.history.last() {
                println!(
                    "epoch {}: L_text {} L_prompt {} L_fusion {}",
                    last.epoch, last.text, last.prompt, last.fusion
                );
            }
            println!("checkpoint: {}", cfg.output_dir.join(CHECKPOINT_FILE).display());
        }
        Command::Caption {
            checkpoint,
            image,
            manifest,
            resize,
        } => {
            let cfg = load_config(g, None)?;
            let state = Checkpoint::load(checkpoint)?.restore()?;
            let model = &state.model;
            let records = match manifest {
                Some(m) => {
                    let ds = load_manifest(m)?;
                    let mut ck_cfg = cfg.clone();
                    ck_cfg.model = model.config.clone();
                    ck_cfg.data.resize = *resize;
                    let all: Vec<usize> = (0..ds.samples.len()).collect();
                    pipeline::caption_samples(model, &ds, &all, &ck_cfg, exec)?
                }
                None if image.is_empty() => bail!("caption needs --image or --manifest"),
                None => pipeline::caption_files(model, image, *resize, exec)?,
            };
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("captions.jsonl");
            write(&path, &pipeline::records_jsonl(&records)?)?;
            println!("captioned {} images -> {}", records.len(), path.display());
        }
        Command::Eval {
            candidates,
            references,
            pairs,
        } => {
            let cfg = load_config(g, None)?;
            let pairs = eval_pairs(candidates.as_deref(), references.as_deref(), pairs.as_deref())?;
            let report = evaluate(&pairs, &cfg.metrics, exec);
            print!("{}", MetricReport::table(&[("candidates", &report)]));
            std::fs::create_dir_all(&cfg.output_dir)?;
            write(&cfg.output_dir.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Ablate { manifest } => {
            let cfg = load_config(g, manifest.as_deref())?;
            let ds = pipeline::dataset_from_config(&cfg)?;
            prepare_out(&cfg.output_dir, g.force)?;
            let report = pipeline::run_ablation(&cfg, &ds, &cfg.output_dir, exec)?;
            let table = report.table();
            print!("{table}");
            write(&cfg.output_dir.join("ablation.txt"), &table)?;
            write(&cfg.output_dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
