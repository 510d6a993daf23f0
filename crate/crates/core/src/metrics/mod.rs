//! Caption evaluation: BLEU, METEOR, ROUGE-L and CIDEr over tokenized pairs.

mod bleu;
mod cider;
mod meteor;
mod report;
mod rouge;

pub use bleu::{bleu, bleu_scores, brevity_penalty, modified_precision, sentence_bleu, BleuCounts};
pub use cider::{cider, cider_scores, CiderVariant, DocumentFrequency};
pub use meteor::{meteor, meteor_alignment, meteor_sentence, MeteorParams};
pub use report::{evaluate, MetricConfig, MetricReport};
pub use rouge::{lcs_len, rouge_l, rouge_l_sentence};

/// Lowercases, turns every non-alphanumeric character into a space, and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// One candidate with its references, grouped by image for CIDEr.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredPair {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl ScoredPair {
    pub fn new(image_id: impl Into<String>, candidate: &str, references: &[&str]) -> crate::Result<Self> {
        Self::from_tokens(
            image_id.into(),
            tokenize(candidate),
            references.iter().map(|r| tokenize(r)).collect(),
        )
    }

    /// Empty references are dropped; at least one must remain.
    pub fn from_tokens(image_id: String, candidate: Vec<String>, mut references: Vec<Vec<String>>) -> crate::Result<Self> {
        references.retain(|r| !r.is_empty());
        if references.is_empty() {
            return Err(crate::Error::Config(format!(
                "pair {image_id:?} needs at least one non-empty reference"
            )));
        }
        Ok(Self {
            image_id,
            candidate,
            references,
        })
    }
}

pub(crate) fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}
