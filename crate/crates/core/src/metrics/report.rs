use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bleu::bleu;
use super::entity::{entity_counts, EntityCounts};
use crate::corpus::{EntitySet, EntityVocabulary};
use crate::error::{Error, Result};

/// Mean of the entity F1 and BLEU-avg, both on the 0..=100 scale.
pub fn avg_score(entity_f1: f64, bleu_avg: f64) -> f64 {
    (entity_f1 + bleu_avg) / 2.0
}

/// A gold response and the entities annotated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub text: String,
    pub entities: EntitySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueScores {
    pub bleu: [f64; 4],
    pub bleu_avg: f64,
    pub entities: EntityCounts,
    /// Entity F1 of this response alone, 0..=100.
    pub entity_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub bleu_avg: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub avg_score: f64,
    pub entities: EntityCounts,
    pub per_dialogue: Vec<DialogueScores>,
}

/// Scores aligned outputs against references.
///
/// BLEU-n is the mean of per-response BLEU-n; entity scores pool counts
/// over the whole corpus.
pub fn evaluate_corpus(
    outputs: &[String],
    references: &[Reference],
    vocab: &EntityVocabulary,
) -> Result<EvalReport> {
    if outputs.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let mut pooled = EntityCounts::default();
    let mut sums = [0.0; 4];
    let per_dialogue: Vec<DialogueScores> = outputs
        .iter()
        .zip(references)
        .map(|(out, r)| {
            let b = bleu(out, &r.text, 4);
            let counts = entity_counts(out, &r.entities, vocab);
            pooled.add(counts);
            let scores = [b.scores[0], b.scores[1], b.scores[2], b.scores[3]];
            sums.iter_mut().zip(&scores).for_each(|(s, x)| *s += x);
            DialogueScores {
                bleu: scores,
                bleu_avg: b.average,
                entities: counts,
                entity_f1: 100.0 * counts.prf().f1,
            }
        })
        .collect();
    let n = outputs.len().max(1) as f64;
    let [bleu_1, bleu_2, bleu_3, bleu_4] = sums.map(|s| s / n);
    let bleu_avg = (bleu_1 + bleu_2 + bleu_3 + bleu_4) / 4.0;
    let prf = pooled.prf();
    let entity_f1 = 100.0 * prf.f1;
    Ok(EvalReport {
        bleu_1,
        bleu_2,
        bleu_3,
        bleu_4,
        bleu_avg,
        entity_precision: 100.0 * prf.precision,
        entity_recall: 100.0 * prf.recall,
        entity_f1,
        avg_score: avg_score(entity_f1, bleu_avg),
        entities: pooled,
        per_dialogue,
    })
}

/// Plain-text comparison table, one row per system, two decimals.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "Method", "Avg.", "F1", "BLEU", "P", "R", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4"
    );
    for (name, r) in rows {
        let pad = width - name.chars().count() + name.len();
        let _ = writeln!(
            out,
            "{:<pad$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
            name,
            r.avg_score,
            r.entity_f1,
            r.bleu_avg,
            r.entity_precision,
            r.entity_recall,
            r.bleu_1,
            r.bleu_2,
            r.bleu_3,
            r.bleu_4
        );
    }
    out
}
