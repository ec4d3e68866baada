use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Character-level BLEU-1 through BLEU-n, scaled to 0..=100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// `scores[i]` is BLEU-(i+1).
    pub scores: Vec<f64>,
    /// Mean of `scores`.
    pub average: f64,
}

fn ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total candidate n-grams of order `n`.
fn matches(cand: &[char], reference: &[char], n: usize) -> (usize, usize) {
    let r = ngrams(reference, n);
    let c = ngrams(cand, n);
    let hit = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (hit, cand.len().saturating_sub(n - 1))
}

/// Unigram precision is unsmoothed; higher orders use add-one smoothing.
/// An empty candidate scores zero everywhere.
///
/// # Panics
/// If `max_n` is zero.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> Bleu {
    assert!(max_n >= 1, "max_n must be at least 1");
    let cand: Vec<char> = candidate.chars().collect();
    let reference: Vec<char> = reference.chars().collect();
    if cand.is_empty() {
        return Bleu {
            scores: vec![0.0; max_n],
            average: 0.0,
        };
    }
    let bp = (1.0 - reference.len() as f64 / cand.len() as f64)
        .exp()
        .min(1.0);
    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (hit, total) = matches(&cand, &reference, n);
        let p = if n == 1 {
            hit as f64 / total as f64
        } else {
            (hit + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
        scores.push(100.0 * bp * (log_sum / n as f64).exp());
    }
    let average = scores.iter().sum::<f64>() / max_n as f64;
    Bleu { scores, average }
}
