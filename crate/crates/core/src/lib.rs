//! Entity-aware response generation for medical dialogues.
//!
//! The pipeline predicts the entities the next doctor turn should mention
//! ([`entity`]), generates a response conditioned on them ([`generator`])
//! and decodes with entity-revised diverse beam search ([`decode`]).
//! [`metrics`] scores responses by character BLEU and entity F1, and
//! [`pipeline`] ties the stages together over a corpus.
//!
//! ```
//! use medgen::decode::toy::RandomScorer;
//! use medgen::decode::{beam_search, greedy};
//!
//! let s = RandomScorer::new(8, 3);
//! let best = &beam_search(&s, 1, 5, 0.0)?[0];
//! assert_eq!(best.tokens, greedy(&s, 5)?.tokens);
//! # Ok::<(), medgen::Error>(())
//! ```

pub mod corpus;
pub mod decode;
pub mod entity;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/entity-prediction.md")]
    mod entity_prediction {}
    #[doc = include_str!("../../../book/src/generator.md")]
    mod generator {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
