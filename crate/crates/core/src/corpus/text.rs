use serde::{Deserialize, Serialize};

use super::vocab::{EntitySet, EntityVocabulary};

/// Sentence delimiters used when none are configured.
pub const DEFAULT_DELIMITERS: [char; 10] = ['，', '。', '？', '！', '；', ',', '.', '?', '!', ';'];

/// One dictionary hit. Offsets are in characters, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityMatches {
    pub entities: EntitySet,
    pub mentions: Vec<Mention>,
}

/// Leftmost-longest dictionary matching. At each position the longest
/// vocabulary entry starting there wins and scanning resumes after it, so
/// overlapping shorter entries are never reported.
pub fn match_entities(text: &str, vocab: &EntityVocabulary) -> EntityMatches {
    let chars: Vec<char> = text.chars().collect();
    let longest = vocab.max_entity_chars();
    let mut out = EntityMatches::default();
    let mut i = 0;
    let mut buf = String::new();
    while i < chars.len() {
        let mut hit = None;
        let max = longest.min(chars.len() - i);
        for len in (1..=max).rev() {
            buf.clear();
            buf.extend(&chars[i..i + len]);
            if vocab.contains(&buf) {
                hit = Some(len);
                break;
            }
        }
        match hit {
            Some(len) => {
                let entity = buf.clone();
                out.entities.insert(entity.clone());
                out.mentions.push(Mention {
                    entity,
                    start: i,
                    end: i + len,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

/// Splits after every delimiter, keeping the delimiter with its sentence.
/// Empty pieces are dropped, so the pieces always concatenate back to
/// `text`.
pub fn split_sentences(text: &str, delimiters: &[char]) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if delimiters.contains(&c) {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
