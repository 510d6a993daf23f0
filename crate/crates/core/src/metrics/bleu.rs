use std::collections::HashMap;

use super::{ngrams, ScoredPair};

/// Clipped n-gram matches, candidate n-gram totals and lengths for one pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuCounts {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuCounts {
    pub fn of(pair: &ScoredPair, max_n: usize) -> Self {
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            let mut cand: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(&pair.candidate, n) {
                *cand.entry(g).or_default() += 1;
            }
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &pair.references {
                let mut counts: HashMap<&[String], usize> = HashMap::new();
                for g in ngrams(r, n) {
                    *counts.entry(g).or_default() += 1;
                }
                for (g, c) in counts {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
            totals[n - 1] = pair.candidate.len().saturating_sub(n - 1);
        }
        Self {
            matches,
            totals,
            candidate_len: pair.candidate.len(),
            reference_len: closest_ref_len(pair),
        }
    }

    fn add(&mut self, other: &Self) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// `BP * exp(sum_n w_n log P_n)`; zero when any weighted precision is zero.
    pub fn score(&self, weights: &[f64]) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (n, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (m, t) = (self.matches[n], self.totals[n]);
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += w * (m as f64 / t as f64).ln();
        }
        brevity_penalty(self.candidate_len, self.reference_len) * log_sum.exp()
    }
}

/// Reference length closest to the candidate length; ties go to the shorter.
fn closest_ref_len(pair: &ScoredPair) -> usize {
    let c = pair.candidate.len() as isize;
    pair.references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| ((r as isize - c).abs(), r))
        .unwrap_or(0)
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Clipped n-gram precision of a single pair.
pub fn modified_precision(pair: &ScoredPair, n: usize) -> f64 {
    let c = BleuCounts::of(pair, n);
    match c.totals[n - 1] {
        0 => 0.0,
        t => c.matches[n - 1] as f64 / t as f64,
    }
}

/// Corpus BLEU with pooled counts and explicit weights `w_1..w_N`.
pub fn bleu(pairs: &[ScoredPair], weights: &[f64]) -> f64 {
    let mut total = BleuCounts::default();
    for p in pairs {
        total.add(&BleuCounts::of(p, weights.len()));
    }
    if total.matches.is_empty() {
        return 0.0;
    }
    total.score(weights)
}

/// Corpus BLEU-1..BLEU-N, each with uniform weights over its own orders.
pub fn bleu_scores(pairs: &[ScoredPair], max_n: usize) -> Vec<f64> {
    let mut total = BleuCounts::default();
    for p in pairs {
        total.add(&BleuCounts::of(p, max_n));
    }
    (1..=max_n)
        .map(|k| {
            if total.matches.is_empty() {
                0.0
            } else {
                total.score(&vec![1.0 / k as f64; k])
            }
        })
        .collect()
}

pub fn sentence_bleu(pair: &ScoredPair, weights: &[f64]) -> f64 {
    BleuCounts::of(pair, weights.len()).score(weights)
}
