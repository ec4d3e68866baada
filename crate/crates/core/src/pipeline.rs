//! Corpus-level glue: builds decoding inputs, runs a strategy over every
//! doctor turn and scores the results.

use serde::{Deserialize, Serialize};

use crate::corpus::{linearize_context, Dialogue, EntitySet, EntityVocabulary, Tokenizer};
use crate::decode::{
    decode_response, ensemble_scorer, DecodeConfig, EnsembleScorer, RevisionReport, Strategy,
};
use crate::error::{Error, Result};
use crate::generator::{EntitySource, FusionConfig, FusionInput, FusionModel, FusionScorer};
use crate::metrics::{evaluate_corpus, render_table, EvalReport, Reference};
use crate::nn::ParamStore;

/// A generator architecture with one or more trained weight sets. Several
/// checkpoints decode as a logit-averaging ensemble.
#[derive(Debug, Clone)]
pub struct Generator {
    pub model: FusionModel,
    pub checkpoints: Vec<ParamStore>,
}

impl Generator {
    /// Rebuilds the architecture and checks every checkpoint against it.
    pub fn load(
        cfg: &FusionConfig,
        vocab_size: usize,
        entity_classes: usize,
        domain_classes: usize,
        checkpoints: Vec<ParamStore>,
    ) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::Empty("generator checkpoints".into()));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (model, template) = FusionModel::new(
            cfg.clone(),
            vocab_size,
            entity_classes,
            domain_classes,
            &mut rng,
        )?;
        let checkpoints = checkpoints
            .iter()
            .map(|c| {
                let mut s = template.clone();
                s.copy_values_from(c)?;
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(Generator { model, checkpoints })
    }

    pub fn scorer(&self, input: &FusionInput) -> Result<EnsembleScorer<FusionScorer<'_>>> {
        let members = self
            .checkpoints
            .iter()
            .map(|p| FusionScorer::new(&self.model, p, input))
            .collect::<Result<Vec<_>>>()?;
        ensemble_scorer(members)
    }
}

/// One doctor turn to respond to.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeItem {
    pub dialogue: String,
    pub turn: usize,
    pub input: FusionInput,
    pub predicted: EntitySet,
    pub reference: Reference,
}

/// Decoding inputs for every doctor turn of `corpus`, conditioned on gold
/// or predicted entities.
pub fn decode_items(
    corpus: &[Dialogue],
    tok: &Tokenizer,
    source: EntitySource<'_>,
    history_turns: usize,
) -> Result<Vec<DecodeItem>> {
    let mut out = Vec::new();
    for d in corpus {
        for t in d.target_turns() {
            let ctx = linearize_context(d, t, history_turns, false, tok)?;
            let turn = &d.turns[t];
            let predicted = match source {
                EntitySource::Gold => turn.entity_set(),
                EntitySource::Predicted(p) => p.predict(d, t)?,
            };
            out.push(DecodeItem {
                dialogue: d.id.clone(),
                turn: t,
                input: FusionInput::new(&ctx, &predicted, tok),
                predicted,
                reference: Reference {
                    text: turn.text.clone(),
                    entities: turn.entity_set(),
                },
            });
        }
    }
    Ok(out)
}

/// Seed of the `index`-th item; every strategy sees the same value.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub dialogue: String,
    pub turn: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub predicted_entities: Vec<String>,
    pub response: String,
    pub candidates: Vec<String>,
    pub revision_report: Option<RevisionReport>,
    pub reference: String,
}

pub fn decode_corpus(
    generator: &Generator,
    items: &[DecodeItem],
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    strategy: Strategy,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<Vec<DecodeRecord>> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let scorer = generator.scorer(&item.input)?;
            let s = item_seed(seed, i);
            let out = decode_response(&scorer, strategy, &item.predicted, vocab, tok, cfg, s)?;
            Ok(DecodeRecord {
                dialogue: item.dialogue.clone(),
                turn: item.turn,
                strategy,
                seed: s,
                predicted_entities: item.predicted.iter().cloned().collect(),
                response: out.response,
                candidates: out.candidates,
                revision_report: out.revision,
                reference: item.reference.text.clone(),
            })
        })
        .collect()
}

pub fn evaluate_records(
    records: &[DecodeRecord],
    items: &[DecodeItem],
    vocab: &EntityVocabulary,
) -> Result<EvalReport> {
    let outputs: Vec<String> = records.iter().map(|r| r.response.clone()).collect();
    let refs: Vec<Reference> = items.iter().map(|i| i.reference.clone()).collect();
    evaluate_corpus(&outputs, &refs, vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub label: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub items: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, &EvalReport)> = self
            .rows
            .iter()
            .map(|r| (r.label.clone(), &r.report))
            .collect();
        render_table(&rows)
    }
}

/// Runs each strategy over the same items, scorer and per-item seeds.
pub fn compare_decoders(
    generator: &Generator,
    items: &[DecodeItem],
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    strategies: &[Strategy],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<Comparison> {
    let rows = strategies
        .iter()
        .map(|&st| {
            let records = decode_corpus(generator, items, vocab, tok, st, cfg, seed)?;
            Ok(ComparisonRow {
                strategy: st,
                label: st.label(cfg),
                report: evaluate_records(&records, items, vocab)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison {
        seed,
        items: items.len(),
        rows,
    })
}
