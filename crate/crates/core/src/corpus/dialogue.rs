use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{EntitySet, EntityVocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub entities: Vec<String>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>, entities: &[&str]) -> Self {
        Turn {
            speaker,
            text: text.into(),
            entities: entities.iter().map(|e| e.to_string()).collect(),
        }
    }

    pub fn entity_set(&self) -> EntitySet {
        self.entities.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks the structural invariants and that every annotated entity is
    /// in `vocab`.
    pub fn validate(&self, vocab: &EntityVocabulary) -> Result<()> {
        let invalid = |message: String| Error::InvalidDialogue {
            id: self.id.clone(),
            message,
        };
        if self.turns.len() < 2 {
            return Err(invalid(format!(
                "{} turns, need at least 2",
                self.turns.len()
            )));
        }
        if self.turns.last().map(|t| t.speaker) != Some(Speaker::Doctor) {
            return Err(invalid("last turn must be spoken by the doctor".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.is_empty() {
                return Err(invalid(format!("turn {i} has empty text")));
            }
            for e in &turn.entities {
                if !vocab.contains(e) {
                    return Err(Error::UnknownEntity(e.clone()));
                }
            }
        }
        Ok(())
    }

    /// Total number of entity annotations over all turns.
    pub fn entity_count(&self) -> usize {
        self.turns.iter().map(|t| t.entities.len()).sum()
    }

    /// Indices of turns that can serve as a generation target: doctor turns
    /// with at least one turn of history.
    pub fn target_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, t)| t.speaker == Speaker::Doctor)
            .map(|(i, _)| i)
    }
}

/// Reads a newline-delimited corpus and validates every record.
pub fn load_corpus(path: &Path, vocab: &EntityVocabulary) -> Result<Vec<Dialogue>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        dialogue.validate(vocab)?;
        out.push(dialogue);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Dialogue]) -> Result<()> {
    for d in corpus {
        let line = serde_json::to_string(d)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &[Dialogue]) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
