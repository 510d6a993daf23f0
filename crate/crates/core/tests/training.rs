use pvgf_core::checkpoint::Checkpoint;
use pvgf_core::config::RunConfig;
use pvgf_core::data::synth::{generate, generate_synthetic_corpus, SynthConfig};
use pvgf_core::data::vocab::Vocabulary;
use pvgf_core::decoder::DecoderConfig;
use pvgf_core::model::{CaptionModel, ModelConfig, TrainExample, Variant};
use pvgf_core::parallel::Execution;
use pvgf_core::pipeline::{run_training, CHECKPOINT_FILE, CONFIG_FILE, LOSS_FILE};
use pvgf_core::training::{train, train_step, TrainConfig, TrainState, LOSS_CSV_HEADER};
use pvgf_core::Error;

fn fixed_batch(n: usize) -> (CaptionModel, Vec<TrainExample>) {
    let synth = SynthConfig {
        total_samples: Some(n),
        ..SynthConfig::default()
    };
    let (items, catalog) = generate(&synth, 21, Execution::default()).unwrap();
    let config = ModelConfig::default();
    let texts = items
        .iter()
        .map(|(s, _)| s.caption.as_str())
        .chain([config.prompt.template.as_str()])
        .chain(catalog.texts.iter().map(String::as_str));
    let vocab = Vocabulary::build(texts, 1).unwrap();
    let model = CaptionModel::new(config, Variant::PvgfDpc, vocab, catalog, 21).unwrap();
    let examples = items
        .iter()
        .map(|(s, img)| model.example(img.clone(), &s.caption, &s.category).unwrap())
        .collect();
    (model, examples)
}

#[test]
fn two_hundred_steps_on_a_fixed_batch_overfit() {
    let (model, examples) = fixed_batch(8);
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        lr_decay_factor: 1.0,
        ..TrainConfig::default()
    };
    let batch: Vec<&TrainExample> = examples.iter().collect();
    let initial = model.batch_objective(&batch, cfg.alpha, cfg.lambda).unwrap();
    let mut state = TrainState::new(model, &cfg, 0);
    for _ in 0..200 {
        train_step(&mut state, &batch, &cfg, cfg.learning_rate, Execution::default()).unwrap();
    }
    let last = state.model.batch_objective(&batch, cfg.alpha, cfg.lambda).unwrap();
    assert!(last < 0.05 * initial, "initial {initial}, final {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (model, examples) = fixed_batch(7);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    let before = model.params.clone();
    let mut state = TrainState::new(model, &cfg, 0);
    train(&mut state, &examples, &cfg, Execution::default(), |_, _| Ok(true)).unwrap();
    for (a, b) in before.tensors().iter().zip(state.model.params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn identical_runs_have_identical_loss_trajectories() {
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let (model, examples) = fixed_batch(10);
        let mut state = TrainState::new(model, &cfg, 4);
        train(&mut state, &examples, &cfg, Execution::default(), |_, _| Ok(true)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_training_set_is_a_config_error() {
    let (model, _) = fixed_batch(7);
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(model, &cfg, 0);
    let err = train(&mut state, &[], &cfg, Execution::default(), |_, _| Ok(true)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn small_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 3,
        ..RunConfig::default()
    };
    c.synth.resolution = 16;
    c.synth.total_samples = Some(14);
    c.model.encoder.input_resolution = 16;
    c.model.decoder = DecoderConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        ..DecoderConfig::default()
    };
    c.train.epochs = 2;
    c
}

#[test]
fn run_training_writes_artifacts_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let data = generate_synthetic_corpus(&config.synth, 3, &dir.path().join("data"), Execution::default()).unwrap();
    let out = dir.path().join("run");
    let outcome = run_training(&config, &data, &out, None, Execution::default()).unwrap();
    assert_eq!(outcome.history.len(), 2);
    let csv = std::fs::read_to_string(out.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
    assert_eq!(csv.lines().count(), 3);
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.header.epoch, 2);
    assert_eq!(ck.header.history, outcome.history);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(saved["train.epochs"], 2);
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let data = generate_synthetic_corpus(&config.synth, 3, &dir.path().join("data"), Execution::default()).unwrap();
    let out = dir.path().join("run");
    run_training(&config, &data, &out, None, Execution::default()).unwrap();
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    let mut changed = config.clone();
    changed.train.learning_rate *= 2.0;
    changed.train.epochs = 3;
    assert!(run_training(&changed, &data, &dir.path().join("x"), Some(&ck), Execution::default()).is_err());
    let mut longer = config;
    longer.train.epochs = 3;
    let outcome = run_training(&longer, &data, &dir.path().join("y"), Some(&ck), Execution::default()).unwrap();
    assert_eq!(outcome.history.len(), 3);
}
