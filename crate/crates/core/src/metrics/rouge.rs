use super::ScoredPair;

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_score(candidate: &[String], reference: &[String], mu: f64) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let mu2 = mu * mu;
    (1.0 + mu2) * r * p / (r + mu2 * p)
}

pub fn rouge_l_sentence(pair: &ScoredPair, mu: f64) -> f64 {
    pair.references
        .iter()
        .map(|r| f_score(&pair.candidate, r, mu))
        .fold(0.0, f64::max)
}

/// Mean over pairs of the best LCS F-measure across references.
pub fn rouge_l(pairs: &[ScoredPair], mu: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| rouge_l_sentence(p, mu)).sum::<f64>() / pairs.len() as f64
}
