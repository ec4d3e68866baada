//! Decoding strategies over any next-token scorer.

mod beam;
mod edbs;
mod levenshtein;
mod sample;
mod scorer;
mod strategy;
pub mod toy;

pub use beam::{beam_search, diverse_beam_search, Hypothesis};
pub use edbs::{
    coverage, edbs, edbs_search, entity_revise, DeletedSentence, EdbsConfig, EdbsOutput, OmegaMode,
    RevisedCandidate, RevisionMode, RevisionReport, SearchTrace,
};
pub use levenshtein::levenshtein;
pub use sample::{argmax, decode_step_sample, greedy, sample_decode, SampleMode};
pub use scorer::{ensemble_scorer, EnsembleScorer, Scorer};
pub use strategy::{decode_response, DecodeConfig, DecodeOutcome, Strategy};
