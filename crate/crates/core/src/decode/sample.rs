use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam::Hypothesis;
use super::scorer::Scorer;
use crate::error::{Error, Result};

/// Slack when comparing cumulative nucleus mass against `p`.
const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Greedy,
    TopK(usize),
    TopP(f64),
    Multinomial,
}

impl SampleMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SampleMode::TopK(0) => Err(Error::config("top_k", "must be at least 1")),
            SampleMode::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config("top_p", "must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// First index of the largest entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the next token from normalized log-probabilities.
///
/// Candidates are ranked by probability (ties by index); top-k keeps the
/// first `k`, top-p the shortest ranked prefix whose mass reaches `p`. The
/// kept probabilities are renormalized after applying `temperature`.
pub fn decode_step_sample<R: Rng + ?Sized>(
    logprobs: &[f64],
    mode: SampleMode,
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    mode.validate()?;
    if logprobs.is_empty() {
        return Err(Error::Empty("log-probability vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", "must be positive"));
    }
    if mode == SampleMode::Greedy {
        return Ok(argmax(logprobs));
    }
    let mut ranked: Vec<usize> = (0..logprobs.len()).collect();
    ranked.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]));
    let keep = match mode {
        SampleMode::TopK(k) => k.min(ranked.len()),
        SampleMode::TopP(p) => {
            let mut mass = 0.0;
            let mut n = 0;
            for &i in &ranked {
                mass += logprobs[i].exp();
                n += 1;
                if mass >= p - MASS_EPS {
                    break;
                }
            }
            n
        }
        _ => ranked.len(),
    };
    let kept = &ranked[..keep];
    let top = logprobs[kept[0]] / temperature;
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| (logprobs[i] / temperature - top).exp())
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(kept[dist.sample(rng)])
}

/// Single-hypothesis decoding: one token per step until the end token or
/// `max_len` tokens.
pub fn sample_decode<S: Scorer + ?Sized>(
    scorer: &S,
    mode: SampleMode,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = vec![scorer.bos()];
    let mut hyp = Hypothesis::start();
    while hyp.alive && hyp.tokens.len() < max_len {
        let lp = scorer.log_probs(&prefix)?;
        let t = decode_step_sample(&lp, mode, temperature, &mut rng)?;
        hyp.push(t, lp[t], scorer.eos());
        prefix.push(t);
    }
    Ok(hyp)
}

/// Greedy decoding.
pub fn greedy<S: Scorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    sample_decode(scorer, SampleMode::Greedy, 1.0, max_len, 0)
}
