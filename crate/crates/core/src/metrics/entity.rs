use serde::{Deserialize, Serialize};

use crate::corpus::{match_entities, EntitySet, EntityVocabulary};

/// Pooled entity match counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Precision, recall and F1 as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EntityCounts {
    pub fn add(&mut self, other: EntityCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// An empty denominator counts as perfect precision (or recall).
    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Counts dictionary matches of `generated` against the gold set.
pub fn entity_counts(generated: &str, gold: &EntitySet, vocab: &EntityVocabulary) -> EntityCounts {
    let found = match_entities(generated, vocab).entities;
    let tp = found.intersection(gold).count();
    EntityCounts {
        tp,
        fp: found.len() - tp,
        fn_: gold.len() - tp,
    }
}

pub fn entity_f1_response(generated: &str, gold: &EntitySet, vocab: &EntityVocabulary) -> Prf {
    entity_counts(generated, gold, vocab).prf()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn vocab() -> EntityVocabulary {
        let m: BTreeMap<String, usize> = ["A病", "B病", "C病"]
            .iter()
            .map(|n| (n.to_string(), 0))
            .collect();
        EntityVocabulary::new(m, 5).unwrap()
    }

    fn set(n: &[&str]) -> EntitySet {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_is_perfect() {
        assert_eq!(
            entity_f1_response("有A病和B病", &set(&["A病", "B病"]), &vocab()).f1,
            1.0
        );
    }

    #[test]
    fn one_of_each_error() {
        let c = entity_counts("B病还是C病", &set(&["A病", "B病"]), &vocab());
        assert_eq!(
            c,
            EntityCounts {
                tp: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(c.prf().f1, 0.5);
    }

    #[test]
    fn empty_pool_is_perfect() {
        let p = entity_f1_response("多休息", &EntitySet::new(), &vocab());
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        assert_eq!(
            entity_f1_response("A病", &EntitySet::new(), &vocab()).f1,
            0.0
        );
        assert_eq!(
            entity_f1_response("多休息", &set(&["A病"]), &vocab()).f1,
            0.0
        );
    }
}
