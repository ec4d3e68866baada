//! Pipeline stages shared by the commands and by callers that keep
//! everything in memory.

use anyhow::{Context, Result};
use medgen::corpus::{
    build_tokenizer, generate_synthetic_corpus, load_corpus, split_corpus, Dialogue,
    EntityVocabulary, Tokenizer,
};
use medgen::entity::{
    entity_examples, train_entity_predictor, EntityPredictor, EntityScorer, EntityTraining,
    ThresholdVector,
};
use medgen::generator::{train_generator, EntitySource, GenTrainReport};
use medgen::pipeline::{decode_items, DecodeItem, Generator};

use crate::config::{Conditioning, Loaded, PipelineConfig};

/// Salt separating the generator's random streams from the entity model's.
const GENERATOR_SALT: u64 = 0x0067_656e;
/// Salt for the validation/test split of the held-out dialogues.
const SPLIT_SALT: u64 = 0x0073_706c;

/// A corpus with its vocabularies and seeded splits.
#[derive(Debug, Clone)]
pub struct Data {
    pub corpus: Vec<Dialogue>,
    pub vocab: EntityVocabulary,
    pub tok: Tokenizer,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Data {
    pub fn new(
        corpus: Vec<Dialogue>,
        vocab: EntityVocabulary,
        tok: Tokenizer,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Self {
        let (train, held) = split_corpus(&corpus, cfg.split.holdout, seed);
        let (valid, test) = split_corpus(&held, 0.5, seed ^ SPLIT_SALT);
        Data {
            corpus,
            vocab,
            tok,
            train,
            valid,
            test,
        }
    }

    /// Synthesizes the corpus described by `cfg.synth`.
    pub fn synthetic(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let (corpus, vocab) = generate_synthetic_corpus(&cfg.synth)?;
        let tok = build_tokenizer(&corpus, &vocab)?;
        Ok(Self::new(corpus, vocab, tok, cfg, seed))
    }

    pub fn load(l: &Loaded, seed: u64) -> Result<Self> {
        let p = &l.config.paths;
        let vocab_path = l.path(&p.vocab);
        let vocab = EntityVocabulary::load(&vocab_path)
            .with_context(|| format!("loading {}", vocab_path.display()))?;
        let tok_path = l.path(&p.tokenizer);
        let tok = Tokenizer::load(&tok_path)
            .with_context(|| format!("loading {}", tok_path.display()))?;
        let corpus_path = l.path(&p.corpus);
        let corpus = load_corpus(&corpus_path, &vocab)
            .with_context(|| format!("loading {}", corpus_path.display()))?;
        Ok(Self::new(corpus, vocab, tok, &l.config, seed))
    }
}

pub fn train_entity(cfg: &PipelineConfig, data: &Data, seed: u64) -> Result<EntityTraining> {
    let train = entity_examples(&data.train, &data.vocab, &data.tok, cfg.history_turns)?;
    let valid = entity_examples(&data.valid, &data.vocab, &data.tok, cfg.history_turns)?;
    Ok(train_entity_predictor(
        &train,
        &valid,
        &cfg.entity_model,
        &cfg.entity_train,
        data.tok.vocab_size(),
        seed,
    )?)
}

pub fn predictor(
    scorer: EntityScorer,
    thresholds: ThresholdVector,
    data: &Data,
    history_turns: usize,
) -> EntityPredictor {
    EntityPredictor {
        scorer,
        thresholds,
        vocab: data.vocab.clone(),
        tokenizer: data.tok.clone(),
        history_turns,
    }
}

fn source<'a>(c: Conditioning, predictor: Option<&'a EntityPredictor>) -> Result<EntitySource<'a>> {
    match c {
        Conditioning::Gold => Ok(EntitySource::Gold),
        Conditioning::Predicted => predictor
            .map(EntitySource::Predicted)
            .context("predicted conditioning needs a trained entity model"),
    }
}

pub fn train_gen(
    cfg: &PipelineConfig,
    data: &Data,
    predictor: Option<&EntityPredictor>,
    seed: u64,
) -> Result<(Generator, GenTrainReport)> {
    let t = train_generator(
        &data.train,
        &data.vocab,
        &data.tok,
        source(cfg.train_conditioning, predictor)?,
        &cfg.generator,
        &cfg.gen_train,
        seed ^ GENERATOR_SALT,
    )?;
    Ok((
        Generator {
            model: t.model,
            checkpoints: t.checkpoints,
        },
        t.report,
    ))
}

/// Test-split decoding inputs, truncated to `eval.max_items`.
pub fn test_items(
    cfg: &PipelineConfig,
    data: &Data,
    predictor: Option<&EntityPredictor>,
) -> Result<Vec<DecodeItem>> {
    let mut items = decode_items(
        &data.test,
        &data.tok,
        source(cfg.decode_conditioning, predictor)?,
        cfg.history_turns,
    )?;
    if let Some(n) = cfg.eval.max_items {
        items.truncate(n);
    }
    Ok(items)
}
