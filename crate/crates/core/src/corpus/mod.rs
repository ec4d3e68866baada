//! Dialogues, entity inventories, tokenization and the synthetic corpus.

mod dialogue;
mod linearize;
mod stats;
mod synth;
mod text;
mod tokenizer;
mod vocab;

pub use dialogue::{load_corpus, save_corpus, write_corpus, Dialogue, Speaker, Turn};
pub use linearize::{linearize_context, linearize_dialogue, LinearizedInput};
pub use stats::{
    corpus_stats, corpus_totals, filter_by_entity_count, split_corpus, CorpusStats, CorpusTotals,
};
pub use synth::{entity_name, generate_synthetic_corpus, SynthConfig};
pub use text::{match_entities, split_sentences, EntityMatches, Mention, DEFAULT_DELIMITERS};
pub use tokenizer::{Tokenizer, BOS, CLS, EOS, MAX_VOCAB, PAD, SAP, SEP, UNK};
pub use vocab::{EntitySet, EntityVocabulary, DEFAULT_DOMAINS, MAX_ENTITIES};

use crate::error::Result;

/// Tokenizer covering every character of the corpus texts and entity names.
pub fn build_tokenizer(corpus: &[Dialogue], vocab: &EntityVocabulary) -> Result<Tokenizer> {
    let texts = corpus
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.text.as_str()))
        .chain(vocab.names().iter().map(String::as_str));
    Tokenizer::from_texts(texts, MAX_VOCAB)
}
