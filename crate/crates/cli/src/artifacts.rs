use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use medgen::corpus::{write_corpus, Dialogue, EntityVocabulary, Tokenizer};
use medgen::entity::{EntityModelConfig, EntityScorer};
use medgen::generator::FusionConfig;
use medgen::nn::params::Checkpoint;
use medgen::nn::ParamStore;
use medgen::pipeline::Generator;
use serde::{Deserialize, Serialize};

/// Writes `bytes` to `path` through a temporary file in the same
/// directory, so a failed command never leaves a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("staging {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn corpus_bytes(corpus: &[Dialogue]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_corpus(&mut out, corpus)?;
    Ok(out)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn vocab_bytes(vocab: &EntityVocabulary) -> Result<Vec<u8>> {
    Ok(vocab.to_json()?.into_bytes())
}

pub fn tokenizer_bytes(tok: &Tokenizer) -> Result<Vec<u8>> {
    Ok(tok.to_json()?.into_bytes())
}

/// Trained entity scorer with the settings needed to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityModelFile {
    pub config: EntityModelConfig,
    pub vocab_size: usize,
    pub classes: usize,
    pub history_turns: usize,
    pub params: Checkpoint,
}

impl EntityModelFile {
    pub fn new(scorer: &EntityScorer, history_turns: usize) -> Self {
        EntityModelFile {
            config: scorer.model.cfg.clone(),
            vocab_size: scorer.model.vocab_size,
            classes: scorer.model.classes,
            history_turns,
            params: scorer.params.to_checkpoint(),
        }
    }

    pub fn scorer(&self) -> Result<EntityScorer> {
        let params = ParamStore::from_checkpoint(&self.params)?;
        Ok(EntityScorer::from_params(
            self.config.clone(),
            self.vocab_size,
            self.classes,
            &params,
        )?)
    }
}

/// Generator architecture and one checkpoint per fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorFile {
    pub config: FusionConfig,
    pub vocab_size: usize,
    pub entity_classes: usize,
    pub domain_classes: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl GeneratorFile {
    pub fn new(generator: &Generator) -> Self {
        let m = &generator.model;
        GeneratorFile {
            config: m.cfg.clone(),
            vocab_size: m.vocab_size,
            entity_classes: m.entity_classes,
            domain_classes: m.domain_classes,
            checkpoints: generator
                .checkpoints
                .iter()
                .map(ParamStore::to_checkpoint)
                .collect(),
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        let stores = self
            .checkpoints
            .iter()
            .map(ParamStore::from_checkpoint)
            .collect::<medgen::Result<Vec<_>>>()?;
        Ok(Generator::load(
            &self.config,
            self.vocab_size,
            self.entity_classes,
            self.domain_classes,
            stores,
        )?)
    }
}
