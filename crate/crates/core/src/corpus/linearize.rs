use serde::{Deserialize, Serialize};

use super::dialogue::Dialogue;
use super::tokenizer::{Tokenizer, CLS, SAP, SEP};
use crate::error::{Error, Result};

/// Model input for one dialogue prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedInput {
    pub tokens: Vec<usize>,
    /// Half-open token ranges of each history turn's text.
    pub sentence_spans: Vec<(usize, usize)>,
    pub sentence_entities: Vec<Vec<String>>,
}

/// Serializes turns `0..upto_turn` as
/// `[CLS] text₁ [SAP] ent [SAP] ent [SEP] text₂ ... [SEP]`.
///
/// Each turn's entity block is emitted only when `include_history_entities`
/// is set; repeated annotations within a turn are emitted once.
pub fn linearize_dialogue(
    d: &Dialogue,
    upto_turn: usize,
    include_history_entities: bool,
    tok: &Tokenizer,
) -> Result<LinearizedInput> {
    if upto_turn == 0 || upto_turn > d.turns.len() {
        return Err(Error::TurnOutOfRange {
            index: upto_turn,
            turns: d.turns.len(),
        });
    }
    let mut tokens = vec![CLS];
    let mut sentence_spans = Vec::with_capacity(upto_turn);
    let mut sentence_entities = Vec::with_capacity(upto_turn);
    for turn in &d.turns[..upto_turn] {
        let start = tokens.len();
        tokens.extend(tok.encode(&turn.text));
        sentence_spans.push((start, tokens.len()));
        let mut seen: Vec<String> = Vec::new();
        for e in &turn.entities {
            if !seen.contains(e) {
                seen.push(e.clone());
            }
        }
        if include_history_entities {
            for e in &seen {
                tokens.push(SAP);
                tokens.extend(tok.encode(e));
            }
        }
        tokens.push(SEP);
        sentence_entities.push(seen);
    }
    Ok(LinearizedInput {
        tokens,
        sentence_spans,
        sentence_entities,
    })
}

/// Linearizes the `history_turns` turns preceding `target`, or every
/// earlier turn when `history_turns` is 0.
pub fn linearize_context(
    d: &Dialogue,
    target: usize,
    history_turns: usize,
    include_history_entities: bool,
    tok: &Tokenizer,
) -> Result<LinearizedInput> {
    if target == 0 || target > d.turns.len() {
        return Err(Error::TurnOutOfRange {
            index: target,
            turns: d.turns.len(),
        });
    }
    let start = if history_turns == 0 {
        0
    } else {
        target.saturating_sub(history_turns)
    };
    let window = Dialogue {
        id: d.id.clone(),
        turns: d.turns[start..target].to_vec(),
    };
    linearize_dialogue(&window, target - start, include_history_entities, tok)
}
