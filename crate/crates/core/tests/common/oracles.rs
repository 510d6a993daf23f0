//! Slow, literal metric implementations used as test oracles.

use std::collections::{BTreeMap, BTreeSet};

use pvgf_core::metrics::ScoredPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Gram = Vec<String>;

fn grams(tokens: &[String], n: usize) -> Vec<Gram> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count(tokens: &[String], n: usize) -> BTreeMap<Gram, usize> {
    let mut m = BTreeMap::new();
    for g in grams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

pub fn bleu(pairs: &[ScoredPair], k: usize) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=k {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for p in pairs {
            let cand = count(&p.candidate, n);
            for (g, c) in &cand {
                let best = p
                    .references
                    .iter()
                    .map(|r| count(r, n).get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap();
                clipped += (*c).min(best);
                total += c;
            }
        }
        if clipped == 0 {
            return 0.0;
        }
        log_p += (clipped as f64 / total as f64).ln() / k as f64;
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let mut r = 0usize;
    for p in pairs {
        let cl = p.candidate.len() as i64;
        let mut best = p.references[0].len() as i64;
        for x in &p.references {
            let l = x.len() as i64;
            let (d, bd) = ((l - cl).abs(), (best - cl).abs());
            if d < bd || (d == bd && l < best) {
                best = l;
            }
        }
        r += best as usize;
    }
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

/// Every maximal-size injective matching of equal tokens, by exhaustive search.
fn alignments(c: &[String], r: &[String]) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, c: &[String], r: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == c.len() {
            out.push(cur.clone());
            return;
        }
        go(i + 1, c, r, used, cur, out);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, c, r, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut all = Vec::new();
    go(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut all);
    let best = all.iter().map(Vec::len).max().unwrap_or(0);
    all.retain(|a| a.len() == best);
    all
}

fn chunks(a: &[(usize, usize)]) -> usize {
    let mut n = 0;
    for (k, &(i, j)) in a.iter().enumerate() {
        if k == 0 || a[k - 1] != (i - 1, j.wrapping_sub(1)) {
            n += 1;
        }
    }
    n
}

fn meteor_one(c: &[String], r: &[String]) -> f64 {
    let all = alignments(c, r);
    let m = all[0].len();
    if m == 0 {
        return 0.0;
    }
    let ch = all.iter().map(|a| chunks(a)).min().unwrap();
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = p * rc / (0.9 * p + 0.1 * rc);
    let pen = 0.5 * (ch as f64 / m as f64).powi(3);
    fmean * (1.0 - pen)
}

pub fn meteor(pairs: &[ScoredPair]) -> f64 {
    let s: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| meteor_one(&p.candidate, r)).fold(0.0, f64::max))
        .sum();
    s / pairs.len() as f64
}

/// Longest common subsequence by enumerating subsequences of the shorter side.
fn lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if sub.iter().all(|s| it.any(|x| x == *s)) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_one(c: &[String], r: &[String], mu: f64) -> f64 {
    let l = lcs(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    (1.0 + mu * mu) * rc * p / (rc + mu * mu * p)
}

pub fn rouge_l(pairs: &[ScoredPair], mu: f64) -> f64 {
    let s: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| rouge_one(&p.candidate, r, mu)).fold(0.0, f64::max))
        .sum();
    s / pairs.len() as f64
}

pub fn cider(pairs: &[ScoredPair]) -> f64 {
    let mut images: BTreeMap<&str, Vec<&Vec<String>>> = BTreeMap::new();
    for p in pairs {
        images.entry(p.image_id.as_str()).or_default().extend(&p.references);
    }
    let n_img = images.len() as f64;
    let df = |g: &Gram| -> usize {
        images
            .values()
            .filter(|refs| refs.iter().any(|r| grams(r, g.len()).contains(g)))
            .count()
    };
    let vector = |tokens: &[String], n: usize| -> BTreeMap<Gram, f64> {
        let counts = count(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let d = df(&g);
                let idf = if d == 0 { 0.0 } else { (n_img / d as f64).ln() };
                (g, c as f64 / total as f64 * idf)
            })
            .collect()
    };
    let mut sum = 0.0;
    for p in pairs {
        let mut s = 0.0;
        for r in &p.references {
            for n in 1..=4 {
                let (a, b) = (vector(&p.candidate, n), vector(r, n));
                let keys: BTreeSet<&Gram> = a.keys().chain(b.keys()).collect();
                let mut dot = 0.0;
                let (mut na, mut nb) = (0.0, 0.0);
                for k in keys {
                    let (x, y) = (a.get(k).copied().unwrap_or(0.0), b.get(k).copied().unwrap_or(0.0));
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na > 0.0 && nb > 0.0 {
                    s += dot / (na.sqrt() * nb.sqrt());
                }
            }
        }
        sum += s / p.references.len() as f64;
    }
    sum / pairs.len() as f64
}

const WORDS: [&str; 6] = ["a", "deity", "ghost", "sits", "on", "lotus"];

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
}

/// Small random corpus over a tiny vocabulary so n-grams collide often.
pub fn random_corpus(seed: u64) -> Vec<ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    (0..n)
        .map(|_| {
            let image = format!("img{}", rng.random_range(0..3));
            let cand = sentence(&mut rng, 1, 7);
            let refs = (0..rng.random_range(1..=3)).map(|_| sentence(&mut rng, 1, 7)).collect();
            ScoredPair::from_tokens(image, cand, refs).unwrap()
        })
        .collect()
}
