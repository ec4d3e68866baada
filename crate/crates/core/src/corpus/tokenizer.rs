use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const SAP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const UNK: usize = 6;

const SPECIALS: [&str; 7] = [
    "[PAD]", "[CLS]", "[SEP]", "[SAP]", "[BOS]", "[EOS]", "[UNK]",
];

/// Default cap on the token vocabulary, specials included.
pub const MAX_VOCAB: usize = 128;

/// Character-level tokenizer. Ids `0..7` are the special tokens; ordinary
/// characters follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    chars: String,
}

impl Tokenizer {
    /// Builds a tokenizer over the distinct characters of `texts`.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_vocab: usize,
    ) -> Result<Self> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set, max_vocab)
    }

    fn from_chars(set: BTreeSet<char>, max_vocab: usize) -> Result<Self> {
        let size = SPECIALS.len() + set.len();
        if size > max_vocab {
            return Err(Error::InvalidVocabulary(format!(
                "{size} tokens exceed the limit of {max_vocab}"
            )));
        }
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS.len()))
            .collect();
        Ok(Tokenizer { chars, index })
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(UNK))
            .collect()
    }

    /// Concatenates the characters of `ids`, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.chars.get(id - SPECIALS.len()))
            .collect()
    }

    /// Human-readable form of a single token.
    pub fn token_str(&self, id: usize) -> String {
        match SPECIALS.get(id) {
            Some(s) => (*s).to_string(),
            None => self
                .chars
                .get(id - SPECIALS.len())
                .map(|c| c.to_string())
                .unwrap_or_else(|| format!("<{id}>")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            chars: self.chars.iter().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        let set: BTreeSet<char> = file.chars.chars().collect();
        if set.len() != file.chars.chars().count() {
            return Err(Error::InvalidVocabulary("duplicate characters".into()));
        }
        Self::from_chars(set, usize::MAX)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let tok = Tokenizer::from_texts(["ba", "c"], MAX_VOCAB).unwrap();
        assert_eq!(tok.vocab_size(), 10);
        assert_eq!(tok.encode("abc"), vec![7, 8, 9]);
        assert_eq!(tok.token_str(SAP), "[SAP]");
        assert_eq!(tok.encode("z"), vec![UNK]);
    }

    #[test]
    fn decode_skips_specials() {
        let tok = Tokenizer::from_texts(["ab"], MAX_VOCAB).unwrap();
        assert_eq!(tok.decode(&[CLS, 7, SEP, 8, EOS]), "ab");
    }

    #[test]
    fn vocab_limit() {
        let text: String = (0..200u32)
            .filter_map(|i| char::from_u32(0x4e00 + i))
            .collect();
        assert!(Tokenizer::from_texts([text.as_str()], MAX_VOCAB).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        let tok = Tokenizer::from_texts(["关注：ENT_01。"], MAX_VOCAB).unwrap();
        tok.save(&path).unwrap();
        assert_eq!(Tokenizer::load(&path).unwrap(), tok);
    }
}
