use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialogue::Dialogue;

/// Raw counts from which [`CorpusStats`] is derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTotals {
    pub dialogues: usize,
    pub utterances: usize,
    pub chars: usize,
    pub entities: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub chars_per_dialogue: f64,
    pub chars_per_utterance: f64,
    pub entities_per_dialogue: f64,
    pub entities_per_utterance: f64,
}

impl CorpusStats {
    pub fn from_totals(t: &CorpusTotals) -> Self {
        let per = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        CorpusStats {
            dialogues: t.dialogues,
            utterances: t.utterances,
            chars_per_dialogue: per(t.chars, t.dialogues),
            chars_per_utterance: per(t.chars, t.utterances),
            entities_per_dialogue: per(t.entities, t.dialogues),
            entities_per_utterance: per(t.entities, t.utterances),
        }
    }
}

pub fn corpus_totals(corpus: &[Dialogue]) -> CorpusTotals {
    let mut t = CorpusTotals {
        dialogues: corpus.len(),
        ..CorpusTotals::default()
    };
    for d in corpus {
        t.utterances += d.turns.len();
        for turn in &d.turns {
            t.chars += turn.text.chars().count();
            t.entities += turn.entities.len();
        }
    }
    t
}

pub fn corpus_stats(corpus: &[Dialogue]) -> CorpusStats {
    CorpusStats::from_totals(&corpus_totals(corpus))
}

/// Keeps dialogues with strictly more than `min_entities` annotations.
pub fn filter_by_entity_count(corpus: &[Dialogue], min_entities: usize) -> Vec<Dialogue> {
    corpus
        .iter()
        .filter(|d| d.entity_count() > min_entities)
        .cloned()
        .collect()
}

/// Seeded shuffle, then the last `ceil(fraction * n)` dialogues (at least
/// one when `n >= 2`) become the validation split.
pub fn split_corpus(
    corpus: &[Dialogue],
    fraction: f64,
    seed: u64,
) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = corpus.len();
    let mut held = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    if n >= 2 && fraction > 0.0 {
        held = held.max(1);
    }
    let train = order[..n - held]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    let valid = order[n - held..]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    (train, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dialogue::{Speaker, Turn};
    use crate::corpus::synth::{generate_synthetic_corpus, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn empty_corpus_is_zeroed() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
    }

    #[test]
    fn two_utterances_of_four_chars() {
        let d = Dialogue {
            id: "x".into(),
            turns: vec![
                Turn::new(Speaker::Patient, "abcd", &[]),
                Turn::new(Speaker::Doctor, "efgh", &[]),
            ],
        };
        let s = corpus_stats(&[d]);
        assert_eq!(s.chars_per_utterance, 4.0);
        assert_eq!(s.chars_per_dialogue, 8.0);
    }

    #[test]
    fn published_train_split_counts() {
        // Totals record for the published training split; the character and
        // entity totals are reconstructed from the per-dialogue means.
        let totals = CorpusTotals {
            dialogues: 17864,
            utterances: 385951,
            chars: (200.35_f64 * 17864.0).round() as usize,
            entities: (6.33_f64 * 17864.0).round() as usize,
        };
        let s = CorpusStats::from_totals(&totals);
        assert_eq!(s.dialogues, 17864);
        assert_eq!(s.utterances, 385951);
        assert!((s.chars_per_dialogue - 200.35).abs() < 5e-3);
        assert!((s.entities_per_dialogue - 6.33).abs() < 5e-3);
        assert!(s.utterances >= s.dialogues);
    }

    #[test]
    fn synthetic_recount() {
        let (corpus, _) = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        let s = corpus_stats(&corpus);
        let json = serde_json::to_value(&corpus).unwrap();
        let mut utterances = 0usize;
        let mut chars = 0usize;
        let mut ents = 0usize;
        for d in json.as_array().unwrap() {
            for t in d["turns"].as_array().unwrap() {
                utterances += 1;
                chars += t["text"].as_str().unwrap().chars().count();
                ents += t["entities"].as_array().unwrap().len();
            }
        }
        assert_eq!(s.utterances, utterances);
        assert!((s.chars_per_utterance - chars as f64 / utterances as f64).abs() < 1e-12);
        assert!((s.entities_per_dialogue - ents as f64 / corpus.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn filter_recount() {
        let (corpus, _) = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(filter_by_entity_count(&corpus, 0).len(), corpus.len());
        let kept = filter_by_entity_count(&corpus, 11);
        assert!(!kept.is_empty() && kept.len() < corpus.len());
        let expect: Vec<&Dialogue> = corpus
            .iter()
            .filter(|d| d.turns.iter().map(|t| t.entities.len()).sum::<usize>() > 11)
            .collect();
        assert_eq!(kept.iter().collect::<Vec<_>>(), expect);
        assert!(filter_by_entity_count(&corpus, 1000).is_empty());
    }

    #[test]
    fn split_is_a_partition() {
        let (corpus, _) = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        let (train, valid) = split_corpus(&corpus, 0.2, 3);
        assert_eq!(valid.len(), 80);
        assert_eq!(train.len() + valid.len(), corpus.len());
        let mut ids: Vec<&str> = train.iter().chain(&valid).map(|d| d.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), corpus.len());
        assert_eq!(split_corpus(&corpus, 0.2, 3), (train, valid));
    }

    proptest! {
        #[test]
        fn filters_compose(a in 0usize..20, b in 0usize..20, seed in 0u64..50) {
            let cfg = SynthConfig { dialogues: 40, seed, ..SynthConfig::default() };
            let (corpus, _) = generate_synthetic_corpus(&cfg).unwrap();
            let twice = filter_by_entity_count(&filter_by_entity_count(&corpus, a), b);
            prop_assert_eq!(twice, filter_by_entity_count(&corpus, a.max(b)));
        }
    }
}
