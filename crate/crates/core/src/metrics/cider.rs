use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ngrams, ScoredPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiderVariant {
    /// Sum of per-order cosines averaged over references, no extra scaling.
    #[default]
    AsPrinted,
    /// Adds the `1/N` order average and the `x10` scale of common toolkits.
    Canonical,
}

/// Reference-set document frequencies, one table per n-gram order.
#[derive(Clone, Debug)]
pub struct DocumentFrequency {
    pub num_images: usize,
    tables: Vec<HashMap<Vec<String>, usize>>,
}

impl DocumentFrequency {
    pub fn build(pairs: &[ScoredPair], max_n: usize) -> Self {
        let mut by_image: BTreeMap<&str, Vec<&Vec<String>>> = BTreeMap::new();
        for p in pairs {
            by_image.entry(&p.image_id).or_default().extend(p.references.iter());
        }
        let mut tables = vec![HashMap::new(); max_n];
        for refs in by_image.values() {
            for n in 1..=max_n {
                let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n)).collect();
                for g in seen {
                    *tables[n - 1].entry(g.to_vec()).or_default() += 1;
                }
            }
        }
        Self {
            num_images: by_image.len(),
            tables,
        }
    }

    /// `ln(|images| / df)`, or 0 for n-grams absent from every reference set.
    pub fn idf(&self, gram: &[String]) -> f64 {
        match self.tables[gram.len() - 1].get(gram) {
            Some(&df) if df > 0 => (self.num_images as f64 / df as f64).ln(),
            _ => 0.0,
        }
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> BTreeMap<&'t [String], f64> {
        let total = tokens.len().saturating_sub(n - 1);
        let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
        for g in ngrams(tokens, n) {
            *counts.entry(g).or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(g, c)| (g, c as f64 / total as f64 * self.idf(g)))
            .collect()
    }
}

/// Cosine similarity; zero when either vector is zero.
fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(k, av)| b.get(k).map(|bv| av * bv)).sum();
    dot / (na * nb)
}

/// Score of a single pair against a prepared document-frequency table.
pub fn cider_pair(pair: &ScoredPair, df: &DocumentFrequency, max_n: usize, variant: CiderVariant) -> f64 {
    let mut total = 0.0;
    for r in &pair.references {
        for n in 1..=max_n {
            total += cosine(&df.vector(&pair.candidate, n), &df.vector(r, n));
        }
    }
    let s = total / pair.references.len() as f64;
    match variant {
        CiderVariant::AsPrinted => s,
        CiderVariant::Canonical => s / max_n as f64 * 10.0,
    }
}

/// Per-pair scores.
pub fn cider_scores(pairs: &[ScoredPair], max_n: usize, variant: CiderVariant) -> Vec<f64> {
    let df = DocumentFrequency::build(pairs, max_n);
    pairs.iter().map(|p| cider_pair(p, &df, max_n, variant)).collect()
}

/// Corpus score: mean of per-pair scores.
pub fn cider(pairs: &[ScoredPair], max_n: usize, variant: CiderVariant) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    cider_scores(pairs, max_n, variant).iter().sum::<f64>() / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_image_disjoint_fixture() {
        let pairs = vec![
            ScoredPair::new("img1", "a deity sits on a lotus", &["a deity sits on a lotus"]).unwrap(),
            ScoredPair::new("img2", "two fish swim in rivers", &["two fish swim in rivers"]).unwrap(),
        ];
        assert!((cider(&pairs, 4, CiderVariant::AsPrinted) - 4.0).abs() < 1e-9);
        assert!((cider(&pairs, 4, CiderVariant::Canonical) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn single_image_collapses_to_zero() {
        let pairs = vec![ScoredPair::new("img1", "a b c d", &["a b c d"]).unwrap()];
        assert_eq!(cider(&pairs, 4, CiderVariant::AsPrinted), 0.0);
    }

    #[test]
    fn no_shared_ngrams_is_zero() {
        let pairs = vec![
            ScoredPair::new("img1", "x y z", &["a b c"]).unwrap(),
            ScoredPair::new("img2", "d e f", &["g h i"]).unwrap(),
        ];
        assert_eq!(cider(&pairs, 4, CiderVariant::AsPrinted), 0.0);
    }
}
