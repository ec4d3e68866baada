//! Response quality metrics.

mod bleu;
mod entity;
mod report;

pub use bleu::{bleu, Bleu};
pub use entity::{entity_counts, entity_f1_response, EntityCounts, Prf};
pub use report::{avg_score, evaluate_corpus, render_table, DialogueScores, EvalReport, Reference};
