use super::model::EntityScorer;
use super::threshold::{apply_thresholds, ThresholdVector};
use crate::corpus::{linearize_context, Dialogue, EntitySet, EntityVocabulary, Tokenizer};
use crate::error::Result;

/// A trained scorer with its thresholds and the input settings it was
/// trained under, mapping a dialogue history to an entity set.
#[derive(Debug, Clone)]
pub struct EntityPredictor {
    pub scorer: EntityScorer,
    pub thresholds: ThresholdVector,
    pub vocab: EntityVocabulary,
    pub tokenizer: Tokenizer,
    pub history_turns: usize,
}

impl EntityPredictor {
    /// Entities predicted for turn `target` of `d` from the turns before it.
    pub fn predict(&self, d: &Dialogue, target: usize) -> Result<EntitySet> {
        let input = linearize_context(d, target, self.history_turns, true, &self.tokenizer)?;
        let scores = self.scorer.predict_scores(&input)?;
        Ok(apply_thresholds(&scores, &self.thresholds)?
            .into_iter()
            .map(|k| self.vocab.name(k).to_string())
            .collect())
    }
}
