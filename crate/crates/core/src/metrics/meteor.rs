use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ScoredPair;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeteorParams {
    pub eta: f64,
    pub penalty_weight: f64,
    pub penalty_exponent: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            eta: 0.9,
            penalty_weight: 0.5,
            penalty_exponent: 3.0,
        }
    }
}

type Key = (usize, Vec<u64>, Option<usize>);

struct Aligner<'s> {
    cand: &'s [String],
    reference: &'s [String],
    memo: HashMap<Key, (usize, usize)>,
}

impl Aligner<'_> {
    /// Best (matches, chunks) over candidate suffix `i..`, maximizing matches
    /// and then minimizing chunks.
    fn best(&mut self, i: usize, used: &mut Vec<u64>, prev: Option<usize>) -> (usize, usize) {
        if i == self.cand.len() {
            return (0, 0);
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let mut best = self.best(i + 1, used, None);
        for j in 0..self.reference.len() {
            if self.reference[j] != self.cand[i] || used[j / 64] & (1 << (j % 64)) != 0 {
                continue;
            }
            used[j / 64] |= 1 << (j % 64);
            let (m, c) = self.best(i + 1, used, Some(j));
            used[j / 64] &= !(1 << (j % 64));
            let opens = usize::from(!(j > 0 && prev == Some(j - 1)));
            let cand = (m + 1, c + opens);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        self.memo.insert(key, best);
        best
    }
}

/// Maximum exact unigram matches and the minimal chunk count achieving them.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut a = Aligner {
        cand: candidate,
        reference,
        memo: HashMap::new(),
    };
    let mut used = vec![0u64; reference.len().div_ceil(64).max(1)];
    a.best(0, &mut used, None)
}

fn score_one(candidate: &[String], reference: &[String], p: &MeteorParams) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = meteor_alignment(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let precision = m / candidate.len() as f64;
    let recall = m / reference.len() as f64;
    let pen = p.penalty_weight * (chunks as f64 / m).powf(p.penalty_exponent);
    let f = precision * recall / (p.eta * precision + (1.0 - p.eta) * recall);
    (1.0 - pen) * f
}

/// Best score over the pair's references.
pub fn meteor_sentence(pair: &ScoredPair, p: &MeteorParams) -> f64 {
    pair.references
        .iter()
        .map(|r| score_one(&pair.candidate, r, p))
        .fold(0.0, f64::max)
}

/// Mean sentence score over the corpus.
pub fn meteor(pairs: &[ScoredPair], p: &MeteorParams) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|x| meteor_sentence(x, p)).sum::<f64>() / pairs.len() as f64
}
