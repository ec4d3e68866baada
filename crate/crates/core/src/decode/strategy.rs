use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::beam::{beam_search, diverse_beam_search, Hypothesis};
use super::edbs::{edbs, EdbsConfig, RevisionReport};
use super::sample::{sample_decode, SampleMode};
use super::scorer::Scorer;
use crate::corpus::{EntitySet, EntityVocabulary, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
    TopP,
    Multinomial,
    Beam,
    Dbs,
    Edbs,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Greedy,
        Strategy::TopK,
        Strategy::TopP,
        Strategy::Multinomial,
        Strategy::Beam,
        Strategy::Dbs,
        Strategy::Edbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::TopK => "top_k",
            Strategy::TopP => "top_p",
            Strategy::Multinomial => "multinomial",
            Strategy::Beam => "beam",
            Strategy::Dbs => "dbs",
            Strategy::Edbs => "edbs",
        }
    }

    /// Row label for comparison tables.
    pub fn label(self, cfg: &DecodeConfig) -> String {
        match self {
            Strategy::Greedy => "Greedy".into(),
            Strategy::TopK => format!("Top_k (k={})", cfg.top_k),
            Strategy::TopP => format!("Top_p (p={})", cfg.top_p),
            Strategy::Multinomial => "Multinomial Sampling".into(),
            Strategy::Beam => "Beam Search".into(),
            Strategy::Dbs => "Diverse Beam Search".into(),
            Strategy::Edbs => "EDBS".into(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

/// Settings shared by every strategy. Beam-family strategies and the
/// maximum length come from the `edbs` block so that comparisons use one
/// width, group count and step limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub edbs: EdbsConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            top_k: 20,
            top_p: 0.9,
            temperature: 1.0,
            edbs: EdbsConfig::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        SampleMode::TopK(self.top_k).validate()?;
        SampleMode::TopP(self.top_p).validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        self.edbs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub response: String,
    pub tokens: Vec<usize>,
    /// Every returned candidate text, best first.
    pub candidates: Vec<String>,
    /// Revision report of the chosen candidate (EDBS only).
    pub revision: Option<RevisionReport>,
}

fn from_hypotheses(hyps: Vec<Hypothesis>, eos: Option<usize>, tok: &Tokenizer) -> DecodeOutcome {
    let candidates: Vec<String> = hyps.iter().map(|h| tok.decode(h.content(eos))).collect();
    DecodeOutcome {
        response: candidates.first().cloned().unwrap_or_default(),
        tokens: hyps
            .first()
            .map(|h| h.content(eos).to_vec())
            .unwrap_or_default(),
        candidates,
        revision: None,
    }
}

/// Decodes one response with `strategy`. `seed` replaces `cfg.edbs.seed`
/// so callers can share one seed per example across strategies.
pub fn decode_response<S: Scorer + ?Sized>(
    scorer: &S,
    strategy: Strategy,
    predicted: &EntitySet,
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    let e = &cfg.edbs;
    let eos = scorer.eos();
    let sample = |mode| -> Result<DecodeOutcome> {
        let h = sample_decode(scorer, mode, cfg.temperature, e.max_steps, seed)?;
        Ok(from_hypotheses(vec![h], eos, tok))
    };
    match strategy {
        Strategy::Greedy => sample(SampleMode::Greedy),
        Strategy::TopK => sample(SampleMode::TopK(cfg.top_k)),
        Strategy::TopP => sample(SampleMode::TopP(cfg.top_p)),
        Strategy::Multinomial => sample(SampleMode::Multinomial),
        Strategy::Beam => Ok(from_hypotheses(
            beam_search(scorer, e.beam_width, e.max_steps, e.alpha)?,
            eos,
            tok,
        )),
        Strategy::Dbs => Ok(from_hypotheses(
            diverse_beam_search(
                scorer,
                e.beam_width,
                e.groups,
                e.diversity_strength,
                e.max_steps,
                e.alpha,
            )?,
            eos,
            tok,
        )),
        Strategy::Edbs => {
            let run = EdbsConfig { seed, ..e.clone() };
            let out = edbs(scorer, predicted, vocab, tok, &run)?;
            let best = out.candidates.first();
            Ok(DecodeOutcome {
                response: out.response.clone(),
                tokens: best
                    .map(|c| c.hypothesis.content(eos).to_vec())
                    .unwrap_or_default(),
                candidates: out.candidates.iter().map(|c| c.text.clone()).collect(),
                revision: best.map(|c| c.report.clone()),
            })
        }
    }
}
