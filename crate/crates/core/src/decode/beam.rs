use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scorer::Scorer;
use crate::error::{Error, Result};

/// One partial or finished output sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, without the start token. A finished hypothesis
    /// ends with the end token.
    pub tokens: Vec<usize>,
    /// Log-probability of each chosen token.
    pub log_probs: Vec<f64>,
    /// Running sum of `log_probs`.
    pub score: f64,
    pub alive: bool,
    /// Diversity group that last extended this hypothesis.
    pub group: usize,
}

impl Hypothesis {
    pub fn start() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            score: 0.0,
            alive: true,
            group: 0,
        }
    }

    pub fn push(&mut self, token: usize, log_prob: f64, eos: Option<usize>) {
        self.tokens.push(token);
        self.log_probs.push(log_prob);
        self.score += log_prob;
        if Some(token) == eos {
            self.alive = false;
        }
    }

    /// `score / len^alpha`; `alpha = 0` leaves the score unchanged.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.score;
        }
        self.score / (self.tokens.len().max(1) as f64).powf(alpha)
    }

    /// Tokens with a trailing end token removed.
    pub fn content(&self, eos: Option<usize>) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if Some(t) == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// How one expansion step picks the next beam.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepRule {
    pub width: usize,
    pub groups: usize,
    pub diversity: f64,
    /// Sampling pool size as a multiple of the beam width.
    pub expansion: usize,
}

impl StepRule {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("beam_width", "must be at least 1"));
        }
        if self.groups == 0 || !self.width.is_multiple_of(self.groups) {
            return Err(Error::config("groups", "must divide the beam width"));
        }
        if !(self.diversity >= 0.0 && self.diversity.is_finite()) {
            return Err(Error::config("diversity_strength", "must be non-negative"));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion", "must be at least 1"));
        }
        Ok(())
    }
}

struct Candidate {
    parent: usize,
    token: Option<(usize, f64)>,
    score: f64,
}

/// Expands every live hypothesis by every token and selects the next beam.
///
/// Groups choose in order from one shared candidate pool. Group `g` ranks
/// the candidates not yet taken by `score - diversity * count(token)`, where
/// `count` tallies the tokens earlier groups picked in this step. Finished
/// hypotheses stay in the pool unpenalized. With `rng` present, each group
/// draws its quota without replacement from its best `width * expansion`
/// candidates, weighted by the exponentiated penalized score.
pub(crate) fn expand<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    beam: &[Hypothesis],
    rule: &StepRule,
    mut rng: Option<&mut R>,
) -> Result<Vec<Hypothesis>> {
    let vocab = scorer.vocab_size();
    let mut cands = Vec::new();
    for (i, h) in beam.iter().enumerate() {
        if !h.alive {
            cands.push(Candidate {
                parent: i,
                token: None,
                score: h.score,
            });
            continue;
        }
        let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
        prefix.push(scorer.bos());
        prefix.extend_from_slice(&h.tokens);
        let lp = scorer.log_probs(&prefix)?;
        if lp.len() != vocab {
            return Err(Error::Shape(format!(
                "scorer returned {} log-probs for vocabulary {vocab}",
                lp.len()
            )));
        }
        for (t, &l) in lp.iter().enumerate() {
            cands.push(Candidate {
                parent: i,
                token: Some((t, l)),
                score: h.score + l,
            });
        }
    }

    let quota = rule.width / rule.groups;
    let mut taken = vec![false; cands.len()];
    let mut counts = vec![0usize; vocab];
    let mut next = Vec::with_capacity(rule.width);
    for group in 0..rule.groups {
        let mut ranked: Vec<(usize, f64)> = (0..cands.len())
            .filter(|&c| !taken[c])
            .map(|c| {
                let pen = match cands[c].token {
                    Some((t, _)) => cands[c].score - rule.diversity * counts[t] as f64,
                    None => cands[c].score,
                };
                (c, pen)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let chosen: Vec<usize> = match rng.as_deref_mut() {
            None => ranked.iter().take(quota).map(|&(c, _)| c).collect(),
            Some(rng) => {
                ranked.truncate(rule.width * rule.expansion);
                draw_without_replacement(&ranked, quota, rng)?
            }
        };
        for &c in &chosen {
            taken[c] = true;
            let mut h = beam[cands[c].parent].clone();
            if let Some((t, l)) = cands[c].token {
                h.push(t, l, scorer.eos());
                h.group = group;
                counts[t] += 1;
            }
            next.push(h);
        }
    }
    next.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(next)
}

fn draw_without_replacement<R: Rng + ?Sized>(
    pool: &[(usize, f64)],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut pool = pool.to_vec();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !pool.is_empty() {
        let top = pool.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pool.iter().map(|p| (p.1 - top).exp()).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::NonFinite(format!("beam sampling weights: {e}")))?;
        out.push(pool.remove(dist.sample(rng)).0);
    }
    Ok(out)
}

pub(crate) fn rank_final(mut beam: Vec<Hypothesis>, alpha: f64) -> Vec<Hypothesis> {
    beam.sort_by(|a, b| {
        b.normalized_score(alpha)
            .total_cmp(&a.normalized_score(alpha))
    });
    beam
}

fn run_deterministic<S: Scorer + ?Sized>(
    scorer: &S,
    rule: StepRule,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    rule.validate()?;
    let mut beam = vec![Hypothesis::start()];
    for _ in 0..max_len {
        if !beam.iter().any(|h| h.alive) {
            break;
        }
        beam = expand::<S, rand_chacha::ChaCha8Rng>(scorer, &beam, &rule, None)?;
    }
    Ok(rank_final(beam, alpha))
}

/// Breadth-`beam_width` search over cumulative log-probability.
///
/// Returns up to `beam_width` hypotheses ranked by `score / len^alpha`;
/// normalization affects only this final ranking.
pub fn beam_search<S: Scorer + ?Sized>(
    scorer: &S,
    beam_width: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let rule = StepRule {
        width: beam_width,
        groups: 1,
        diversity: 0.0,
        expansion: 1,
    };
    run_deterministic(scorer, rule, max_len, alpha)
}

/// Group-wise beam search with a penalty on tokens already chosen by
/// earlier groups at the same step.
pub fn diverse_beam_search<S: Scorer + ?Sized>(
    scorer: &S,
    beam_width: usize,
    groups: usize,
    diversity_strength: f64,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    let rule = StepRule {
        width: beam_width,
        groups,
        diversity: diversity_strength,
        expansion: 1,
    };
    run_deterministic(scorer, rule, max_len, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::sample::greedy;
    use crate::decode::toy::RandomScorer;
    use proptest::prelude::*;

    fn brute_force(s: &RandomScorer, steps: usize) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let total = s.vocab.pow(steps as u32);
        for code in 0..total {
            let mut seq = Vec::new();
            let mut c = code;
            for _ in 0..steps {
                seq.push(c % s.vocab);
                c /= s.vocab;
            }
            let mut prefix = vec![s.bos];
            let mut score = 0.0;
            for &t in &seq {
                score += s.log_probs(&prefix).unwrap()[t];
                prefix.push(t);
            }
            if score > best.1 {
                best = (seq, score);
            }
        }
        best
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..20 {
            let mut s = RandomScorer::new(6, seed);
            s.eos = Some(5);
            let b = beam_search(&s, 1, 12, 0.0).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, greedy(&s, 12).unwrap().tokens);
        }
    }

    #[test]
    fn matches_exhaustive_search_on_small_space() {
        for seed in 0..30 {
            let s = RandomScorer::new(3, seed);
            let b = beam_search(&s, 3, 2, 0.0).unwrap();
            let (best, score) = brute_force(&s, 2);
            assert_eq!(b[0].tokens, best);
            assert!((b[0].score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_recomputable_and_sorted() {
        let mut s = RandomScorer::new(7, 4);
        s.eos = Some(6);
        let b = beam_search(&s, 5, 10, 0.0).unwrap();
        for w in b.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &b {
            assert_eq!(h.score, h.log_probs.iter().sum::<f64>());
            let mut prefix = vec![s.bos];
            for (i, &t) in h.tokens.iter().enumerate() {
                assert_eq!(s.log_probs(&prefix).unwrap()[t], h.log_probs[i]);
                prefix.push(t);
            }
            if let Some(p) = h.tokens.iter().position(|&t| t == 6) {
                assert_eq!(p, h.tokens.len() - 1);
                assert!(!h.alive);
            }
        }
    }

    /// Two near-tied first tokens, then one token that dominates after
    /// either of them.
    struct Dominant;

    impl Scorer for Dominant {
        fn vocab_size(&self) -> usize {
            3
        }
        fn bos(&self) -> usize {
            0
        }
        fn eos(&self) -> Option<usize> {
            None
        }
        fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(if prefix.len() == 1 {
                vec![5.0, 4.9, 0.0]
            } else {
                vec![0.0, 0.0, 5.0]
            })
        }
    }

    #[test]
    fn diversity_separates_groups_on_dominant_token() {
        let second = |b: &[Hypothesis]| {
            let mut g: Vec<(usize, usize)> = b.iter().map(|h| (h.group, h.tokens[1])).collect();
            g.sort();
            g
        };
        let plain = diverse_beam_search(&Dominant, 2, 2, 0.0, 2, 0.0).unwrap();
        assert_eq!(second(&plain), vec![(0, 2), (1, 2)]);
        let diverse = diverse_beam_search(&Dominant, 2, 2, 100.0, 2, 0.0).unwrap();
        let picks = second(&diverse);
        assert_eq!(picks[0], (0, 2));
        assert_ne!(picks[1].1, 2);
    }

    #[test]
    fn length_normalization_only_reorders() {
        let mut s = RandomScorer::new(5, 9);
        s.eos = Some(4);
        let raw = beam_search(&s, 4, 8, 0.0).unwrap();
        let norm = beam_search(&s, 4, 8, 1.0).unwrap();
        let key = |b: &[Hypothesis]| {
            let mut t: Vec<Vec<usize>> = b.iter().map(|h| h.tokens.clone()).collect();
            t.sort();
            t
        };
        assert_eq!(key(&raw), key(&norm));
        for w in norm.windows(2) {
            assert!(w[0].normalized_score(1.0) >= w[1].normalized_score(1.0));
        }
    }

    #[test]
    fn invalid_group_count() {
        let s = RandomScorer::new(4, 0);
        assert!(diverse_beam_search(&s, 4, 3, 0.5, 3, 0.0).is_err());
        assert!(beam_search(&s, 0, 3, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn zero_diversity_and_single_group_reduce_to_beam(
            seed in 0u64..500, groups in prop::sample::select(vec![1usize, 2, 4]), lambda in 0.0f64..3.0,
        ) {
            let mut s = RandomScorer::new(6, seed);
            s.eos = Some(5);
            let beam = beam_search(&s, 4, 6, 0.0).unwrap();
            let tokens = |b: &[Hypothesis]| b.iter().map(|h| h.tokens.clone()).collect::<Vec<_>>();
            let dbs0 = diverse_beam_search(&s, 4, groups, 0.0, 6, 0.0).unwrap();
            prop_assert_eq!(tokens(&dbs0), tokens(&beam));
            let g1 = diverse_beam_search(&s, 4, 1, lambda, 6, 0.0).unwrap();
            prop_assert_eq!(tokens(&g1), tokens(&beam));
        }
    }
}
