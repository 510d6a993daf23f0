use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bleu::BleuCounts;
use super::cider::{cider_pair, CiderVariant, DocumentFrequency};
use super::meteor::{meteor_sentence, MeteorParams};
use super::rouge::rouge_l_sentence;
use super::ScoredPair;
use crate::parallel::{map_indexed, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Highest BLEU order; BLEU-k uses uniform weights over orders 1..k.
    pub bleu_max_n: usize,
    pub meteor: MeteorParams,
    pub rouge_mu: f64,
    pub cider_n: usize,
    pub cider_variant: CiderVariant,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_max_n: 4,
            meteor: MeteorParams::default(),
            rouge_mu: 1.2,
            cider_n: 4,
            cider_variant: CiderVariant::AsPrinted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub corpus_size: usize,
    pub bleu_weights: Vec<f64>,
    pub config: MetricConfig,
}

pub const COLUMNS: [&str; 7] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr"];

impl MetricReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor,
            self.rouge_l,
            self.cider,
        ]
    }

    /// Aligned plain-text table, one row per `(label, report)`.
    pub fn table(rows: &[(&str, &MetricReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}", "Model");
        for c in COLUMNS {
            write!(out, "  {c:>7}").unwrap();
        }
        out.push('\n');
        for (label, r) in rows {
            write!(out, "{label:<width$}").unwrap();
            for v in r.values() {
                write!(out, "  {v:>7.3}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

struct PairScores {
    bleu: BleuCounts,
    meteor: f64,
    rouge: f64,
    cider: f64,
}

/// Scores every pair (in parallel when enabled) and reduces in input order.
pub fn evaluate(pairs: &[ScoredPair], config: &MetricConfig, exec: Execution) -> MetricReport {
    let max_n = config.bleu_max_n.max(4);
    let df = DocumentFrequency::build(pairs, config.cider_n);
    let scored = map_indexed(pairs, exec, |_, p| PairScores {
        bleu: BleuCounts::of(p, max_n),
        meteor: meteor_sentence(p, &config.meteor),
        rouge: rouge_l_sentence(p, config.rouge_mu),
        cider: cider_pair(p, &df, config.cider_n, config.cider_variant),
    });
    let mut pooled = BleuCounts {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    let (mut meteor, mut rouge, mut cider) = (0.0, 0.0, 0.0);
    for s in &scored {
        for n in 0..max_n {
            pooled.matches[n] += s.bleu.matches[n];
            pooled.totals[n] += s.bleu.totals[n];
        }
        pooled.candidate_len += s.bleu.candidate_len;
        pooled.reference_len += s.bleu.reference_len;
        meteor += s.meteor;
        rouge += s.rouge;
        cider += s.cider;
    }
    let n = pairs.len().max(1) as f64;
    let bleu_k = |k: usize| pooled.score(&vec![1.0 / k as f64; k]);
    MetricReport {
        bleu_1: bleu_k(1),
        bleu_2: bleu_k(2),
        bleu_3: bleu_k(3),
        bleu_4: bleu_k(4),
        meteor: meteor / n,
        rouge_l: rouge / n,
        cider: cider / n,
        corpus_size: pairs.len(),
        bleu_weights: vec![1.0 / config.bleu_max_n as f64; config.bleu_max_n],
        config: config.clone(),
    }
}
