//! Content prompt module: category classifier over the image feature, the
//! prompt template with learnable vectors, and the classification loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::params::{glorot, Binder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TEMPLATE: &str = "This is a Dongba painting about";

/// Ordered content labels and the subject/action text rendered for each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCatalog {
    pub labels: Vec<String>,
    pub texts: Vec<String>,
}

impl PromptCatalog {
    pub fn new(labels: Vec<String>, texts: Vec<String>) -> Result<Self> {
        let c = Self { labels, texts };
        c.validate()?;
        Ok(c)
    }

    /// Catalog whose label text is `"a <label>"`.
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let texts = labels.iter().map(|l| format!("a {l}")).collect();
        Self::new(labels, texts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("prompt catalog has no labels".into()));
        }
        if self.labels.len() != self.texts.len() {
            return Err(Error::Config("prompt catalog labels and texts differ in length".into()));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::Config(format!("prompt label {i} is empty")));
            }
            if self.labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate prompt label {l:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Number of learnable vectors spliced into the template.
    pub num_vectors: usize,
    pub template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            num_vectors: 4,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

pub fn render_prompt(template: &str, catalog: &PromptCatalog, label: usize) -> Result<String> {
    let b = catalog
        .texts
        .get(label)
        .ok_or_else(|| Error::Config(format!("label index {label} outside catalog of {}", catalog.len())))?;
    Ok(format!("{template} {b}"))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct PromptModule {
    pub config: PromptConfig,
    pub num_labels: usize,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    /// Absent when prompts are never fed to the decoder.
    pub vectors: Option<ParamId>,
}

impl PromptModule {
    pub fn new(
        config: PromptConfig,
        feature_dim: usize,
        model_dim: usize,
        num_labels: usize,
        with_vectors: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::Config("prompt module needs at least one label".into()));
        }
        let classifier_w = store.add(
            "prompt.classifier.weight",
            glorot(rng, &[feature_dim, num_labels], feature_dim, num_labels),
        );
        let classifier_b = store.add("prompt.classifier.bias", Tensor::zeros(&[num_labels]));
        let vectors = (with_vectors && config.num_vectors > 0).then(|| {
            store.add(
                "prompt.vectors",
                glorot(rng, &[config.num_vectors, model_dim], config.num_vectors, model_dim),
            )
        });
        Ok(Self {
            config,
            num_labels,
            classifier_w,
            classifier_b,
            vectors,
        })
    }

    /// Fully connected layer then softmax; returns `[1, n]` probabilities.
    pub fn classify<'p>(&self, tape: &mut Tape<'p>, binder: &mut Binder<'p>, feature: Var) -> Result<Var> {
        let d = tape.shape(feature)[0];
        let x = tape.reshape(feature, &[1, d])?;
        let w = binder.var(tape, self.classifier_w);
        let b = binder.var(tape, self.classifier_b);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.softmax(logits, 1)
    }

    /// Prompt embedding sequence: embedded template tokens, then the learnable
    /// vectors, then the embedded label text.
    pub fn build_prompt<'p>(
        &self,
        tape: &mut Tape<'p>,
        binder: &mut Binder<'p>,
        label: usize,
        catalog: &PromptCatalog,
        vocab: &Vocabulary,
        token_table: ParamId,
    ) -> Result<Var> {
        let (head, tail) = prompt_token_ids(&self.config.template, catalog, vocab, label)?;
        let table = binder.var(tape, token_table);
        let mut parts = Vec::with_capacity(3);
        if !head.is_empty() {
            parts.push(tape.embedding(table, &head)?);
        }
        if let Some(v) = self.vectors {
            parts.push(binder.var(tape, v));
        }
        if !tail.is_empty() {
            parts.push(tape.embedding(table, &tail)?);
        }
        tape.concat_rows(&parts)
    }

    pub fn prompt_len(&self, catalog: &PromptCatalog, vocab: &Vocabulary, label: usize) -> Result<usize> {
        let (head, tail) = prompt_token_ids(&self.config.template, catalog, vocab, label)?;
        Ok(head.len() + tail.len() + self.vectors.map_or(0, |_| self.config.num_vectors))
    }
}

/// Template ids and label-text ids; unknown words map to UNK.
pub fn prompt_token_ids(
    template: &str,
    catalog: &PromptCatalog,
    vocab: &Vocabulary,
    label: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = catalog
        .texts
        .get(label)
        .ok_or_else(|| Error::Config(format!("label index {label} outside catalog of {}", catalog.len())))?;
    Ok((vocab.encode_tokens(template), vocab.encode_tokens(b)))
}

/// `-(1/B) Σ log p(y_i | x_i)` over `[B, n]` probabilities.
pub fn prompt_loss(tape: &mut Tape<'_>, probabilities: Var, labels: &[usize]) -> Result<Var> {
    tape.nll_from_probs(probabilities, labels)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn catalog() -> PromptCatalog {
        PromptCatalog::new(
            vec!["deity".into(), "ghost".into(), "fishing".into()],
            vec!["a deity".into(), "a ghost".into(), "fishing by the river".into()],
        )
        .unwrap()
    }

    #[test]
    fn renders_template() {
        let c = catalog();
        assert_eq!(
            render_prompt(DEFAULT_TEMPLATE, &c, 0).unwrap(),
            "This is a Dongba painting about a deity"
        );
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pm = PromptModule::new(PromptConfig::default(), 5, 8, 4, true, &mut store, &mut rng).unwrap();
        store.get_mut(pm.classifier_w).data_mut().fill(0.0);
        let feat = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&feat);
        let p = pm.classify(&mut tape, &mut binder, f).unwrap();
        assert_eq!(tape.value(p), &[0.25; 4]);
        assert_eq!(argmax(tape.value(p)), 0);
    }

    #[test]
    fn classify_matches_direct_softmax() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pm = PromptModule::new(PromptConfig::default(), 3, 8, 3, false, &mut store, &mut rng).unwrap();
        // identity weights: logits equal the feature
        let w = store.get_mut(pm.classifier_w).data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let feat = Tensor::new(vec![3], vec![2.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&feat);
        let p = pm.classify(&mut tape, &mut binder, f).unwrap();
        let want = [0.66524, 0.24473, 0.09003];
        for (a, b) in tape.value(p).iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((tape.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(tape.value(p)), 0);
    }

    #[test]
    fn zero_labels_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PromptModule::new(PromptConfig::default(), 3, 8, 0, true, &mut store, &mut rng).is_err());
    }

    #[test]
    fn prompt_lengths_follow_splice_arithmetic() {
        let c = catalog();
        let vocab = Vocabulary::build(["this is a dongba painting about a deity ghost"], 1).unwrap();
        for m in [0, 4] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let table = store.add("table", glorot(&mut rng, &[vocab.len(), 8], vocab.len(), 8));
            let cfg = PromptConfig {
                num_vectors: m,
                ..Default::default()
            };
            let pm = PromptModule::new(cfg, 3, 8, c.len(), true, &mut store, &mut rng).unwrap();
            for label in 0..c.len() {
                let rendered = render_prompt(DEFAULT_TEMPLATE, &c, label).unwrap();
                let n_tokens = crate::metrics::tokenize(&rendered).len();
                let mut tape = Tape::new();
                let mut binder = Binder::new(&store);
                let e = pm.build_prompt(&mut tape, &mut binder, label, &c, &vocab, table).unwrap();
                assert_eq!(tape.shape(e), &[n_tokens + m, 8]);
                assert_eq!(pm.prompt_len(&c, &vocab, label).unwrap(), n_tokens + m);
                if m == 0 {
                    let ids = vocab.encode_tokens(&rendered);
                    let t = tape.leaf(store.get(table));
                    let direct = tape.embedding(t, &ids).unwrap();
                    assert_eq!(tape.value(e), tape.value(direct));
                }
            }
        }
    }

    #[test]
    fn prompt_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let l = prompt_loss(&mut tape, p, &[0, 2]).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        let p = tape.constant(&[1, 7], vec![1.0 / 7.0; 7]).unwrap();
        let l = prompt_loss(&mut tape, p, &[3]).unwrap();
        assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-9);

        let p = tape.constant(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let l = prompt_loss(&mut tape, p, &[0, 1]).unwrap();
        let want = -(0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((tape.value(l)[0] - want).abs() < 1e-12);

        let p = tape.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(prompt_loss(&mut tape, p, &[]), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn catalog_validation() {
        assert!(PromptCatalog::from_labels(vec![]).is_err());
        assert!(PromptCatalog::from_labels(vec!["a".into(), "a".into()]).is_err());
        assert!(PromptCatalog::from_labels(vec!["".into()]).is_err());
        assert_eq!(PromptCatalog::from_labels(vec!["deity".into()]).unwrap().texts[0], "a deity");
    }
}
