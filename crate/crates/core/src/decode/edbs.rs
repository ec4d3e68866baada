use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam::{expand, rank_final, Hypothesis, StepRule};
use super::levenshtein::levenshtein;
use super::scorer::Scorer;
use crate::corpus::{
    match_entities, split_sentences, EntitySet, EntityVocabulary, Tokenizer, DEFAULT_DELIMITERS,
};
use crate::error::{Error, Result};

/// Stream offset for per-step Ω draws, kept apart from the sampling stream.
const OMEGA_STREAM: u64 = 0x006f_6d65_6761;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    /// Ω is the configured constant.
    #[default]
    Fixed,
    /// Ω is redrawn uniformly from (0, 1) at every step.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RevisionMode {
    /// Compare each detected mention with the predicted entities.
    #[default]
    Mention,
    /// Compare whole sentences with the predicted entities.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdbsConfig {
    pub beam_width: usize,
    pub groups: usize,
    pub omega: f64,
    pub theta0: f64,
    pub decay: f64,
    /// Largest edit distance at which a mention still counts as a predicted
    /// entity.
    pub edit_distance: usize,
    pub max_steps: usize,
    pub delimiters: Vec<char>,
    pub diversity_strength: f64,
    pub augment_template: String,
    pub recompute_after_delete: bool,
    pub omega_mode: OmegaMode,
    /// Stochastic steps sample from the best `beam_width * expansion`
    /// candidates.
    pub expansion: usize,
    /// Length-normalization exponent for final ranking.
    pub alpha: f64,
    pub revision: RevisionMode,
    pub seed: u64,
}

impl Default for EdbsConfig {
    fn default() -> Self {
        EdbsConfig {
            beam_width: 4,
            groups: 2,
            omega: 0.5,
            theta0: 1.0,
            decay: 0.9,
            edit_distance: 1,
            max_steps: 96,
            delimiters: DEFAULT_DELIMITERS.to_vec(),
            diversity_strength: 0.5,
            augment_template: "关注：{entities}。".into(),
            recompute_after_delete: true,
            omega_mode: OmegaMode::Fixed,
            expansion: 2,
            alpha: 1.0,
            revision: RevisionMode::Mention,
            seed: 0,
        }
    }
}

impl EdbsConfig {
    pub fn validate(&self) -> Result<()> {
        self.step_rule().validate()?;
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::config(
                "omega",
                format!("{} is outside (0, 1)", self.omega),
            ));
        }
        if !(self.theta0 > 0.0 && self.theta0.is_finite()) {
            return Err(Error::config("theta0", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config(
                "decay",
                format!("{} is outside (0, 1)", self.decay),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !self.augment_template.contains("{entities}") {
            return Err(Error::config("augment_template", "must contain {entities}"));
        }
        Ok(())
    }

    pub(crate) fn step_rule(&self) -> StepRule {
        StepRule {
            width: self.beam_width,
            groups: self.groups,
            diversity: self.diversity_strength,
            expansion: self.expansion,
        }
    }

    /// Threshold at step `t`: `theta0` multiplied by `decay` `t` times, in
    /// that order.
    pub fn theta(&self, t: usize) -> f64 {
        (0..t).fold(self.theta0, |th, _| th * self.decay)
    }
}

/// Per-step record of the stochastic switch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub thetas: Vec<f64>,
    pub omegas: Vec<f64>,
    pub stochastic: Vec<bool>,
}

impl SearchTrace {
    /// First step that ran deterministically after a stochastic one.
    pub fn switch_step(&self) -> Option<usize> {
        (1..self.stochastic.len()).find(|&t| self.stochastic[t - 1] && !self.stochastic[t])
    }
}

/// The search half of EDBS.
///
/// Step 0 is a deterministic diverse expansion. At step `t >= 1` the step
/// samples when `omega <= theta_t` and otherwise takes the best
/// candidates; the diversity penalty applies in both cases.
pub fn edbs_search<S: Scorer + ?Sized>(
    scorer: &S,
    cfg: &EdbsConfig,
) -> Result<(Vec<Hypothesis>, SearchTrace)> {
    cfg.validate()?;
    let rule = cfg.step_rule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut omega_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ OMEGA_STREAM);
    let mut trace = SearchTrace::default();
    let mut beam = vec![Hypothesis::start()];
    for t in 0..cfg.max_steps {
        if !beam.iter().any(|h| h.alive) {
            break;
        }
        let theta = cfg.theta(t);
        let omega = match cfg.omega_mode {
            OmegaMode::Fixed => cfg.omega,
            OmegaMode::Uniform => omega_rng.random::<f64>(),
        };
        let stochastic = t > 0 && omega <= theta;
        trace.thetas.push(theta);
        trace.omegas.push(omega);
        trace.stochastic.push(stochastic);
        beam = if stochastic {
            expand(scorer, &beam, &rule, Some(&mut rng))?
        } else {
            expand::<S, ChaCha8Rng>(scorer, &beam, &rule, None)?
        };
    }
    Ok((rank_final(beam, cfg.alpha), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletedSentence {
    pub sentence: String,
    /// Offending mention; absent in literal mode.
    pub mention: Option<String>,
    /// Smallest edit distance to a predicted entity; absent when nothing was
    /// predicted.
    pub distance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionReport {
    pub deleted: Vec<DeletedSentence>,
    pub augmented: Vec<String>,
    /// Fraction of predicted entities occurring in the revised text; 1 when
    /// nothing was predicted.
    pub coverage: f64,
}

impl RevisionReport {
    pub fn is_empty(&self) -> bool {
        self.deleted.is_empty() && self.augmented.is_empty()
    }
}

fn min_distance(mention: &str, predicted: &EntitySet) -> Option<usize> {
    predicted.iter().map(|s| levenshtein(mention, s)).min()
}

/// Entity coverage of `text`.
pub fn coverage(text: &str, predicted: &EntitySet) -> f64 {
    if predicted.is_empty() {
        return 1.0;
    }
    predicted
        .iter()
        .filter(|e| text.contains(e.as_str()))
        .count() as f64
        / predicted.len() as f64
}

/// Deletes sentences carrying entities far from the prediction and appends
/// predicted entities the text lacks.
///
/// In mention mode a sentence is deleted when some detected mention lies
/// more than `edit_distance` edits from every predicted entity. Missing
/// entities are rendered together through `augment_template` as a final
/// sentence.
pub fn entity_revise(
    text: &str,
    predicted: &EntitySet,
    vocab: &EntityVocabulary,
    cfg: &EdbsConfig,
) -> (String, RevisionReport) {
    let limit = cfg.edit_distance;
    let before = match_entities(text, vocab).entities;
    let mut kept = String::new();
    let mut deleted = Vec::new();
    for sentence in split_sentences(text, &cfg.delimiters) {
        let offence = match cfg.revision {
            RevisionMode::Mention => match_entities(&sentence, vocab)
                .mentions
                .into_iter()
                .find_map(|m| {
                    let d = min_distance(&m.entity, predicted);
                    d.is_none_or(|d| d > limit).then_some(DeletedSentence {
                        sentence: sentence.clone(),
                        mention: Some(m.entity),
                        distance: d,
                    })
                }),
            RevisionMode::Literal => predicted.iter().find_map(|s| {
                let d = levenshtein(&sentence, s);
                (d > limit).then_some(DeletedSentence {
                    sentence: sentence.clone(),
                    mention: None,
                    distance: Some(d),
                })
            }),
        };
        match offence {
            Some(d) => deleted.push(d),
            None => kept.push_str(&sentence),
        }
    }
    let present = if cfg.recompute_after_delete {
        match_entities(&kept, vocab).entities
    } else {
        before
    };
    let augmented: Vec<String> = predicted.difference(&present).cloned().collect();
    if !augmented.is_empty() {
        kept.push_str(
            &cfg.augment_template
                .replace("{entities}", &augmented.join("、")),
        );
    }
    let coverage = coverage(&kept, predicted);
    (
        kept,
        RevisionReport {
            deleted,
            augmented,
            coverage,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisedCandidate {
    pub hypothesis: Hypothesis,
    pub raw_text: String,
    pub text: String,
    pub report: RevisionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdbsOutput {
    pub response: String,
    /// Best candidate first.
    pub candidates: Vec<RevisedCandidate>,
    pub trace: SearchTrace,
}

/// Full EDBS: search, revise every hypothesis, then rank by coverage and
/// length-normalized log-probability.
pub fn edbs<S: Scorer + ?Sized>(
    scorer: &S,
    predicted: &EntitySet,
    vocab: &EntityVocabulary,
    tokenizer: &Tokenizer,
    cfg: &EdbsConfig,
) -> Result<EdbsOutput> {
    let (beam, trace) = edbs_search(scorer, cfg)?;
    let mut candidates: Vec<RevisedCandidate> = beam
        .into_iter()
        .map(|h| {
            let raw_text = tokenizer.decode(h.content(scorer.eos()));
            let (text, report) = entity_revise(&raw_text, predicted, vocab, cfg);
            RevisedCandidate {
                hypothesis: h,
                raw_text,
                text,
                report,
            }
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.report.coverage.total_cmp(&a.report.coverage).then(
            b.hypothesis
                .normalized_score(cfg.alpha)
                .total_cmp(&a.hypothesis.normalized_score(cfg.alpha)),
        )
    });
    let response = candidates
        .first()
        .map(|c| c.text.clone())
        .unwrap_or_default();
    Ok(EdbsOutput {
        response,
        candidates,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::beam::diverse_beam_search;
    use crate::decode::toy::RandomScorer;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn vocab(names: &[&str]) -> EntityVocabulary {
        let m: BTreeMap<String, usize> = names.iter().map(|n| (n.to_string(), 0)).collect();
        EntityVocabulary::new(m, 5).unwrap()
    }

    fn set(names: &[&str]) -> EntitySet {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn cfg(edit_distance: usize) -> EdbsConfig {
        EdbsConfig {
            edit_distance,
            ..EdbsConfig::default()
        }
    }

    #[test]
    fn schedule_switches_after_six_steps() {
        let c = EdbsConfig {
            max_steps: 20,
            ..EdbsConfig::default()
        };
        let s = RandomScorer::new(5, 3);
        let (_, trace) = edbs_search(&s, &c).unwrap();
        assert_eq!(trace.thetas.len(), 20);
        let mut expect = 1.0;
        for &th in &trace.thetas {
            assert_eq!(th, expect);
            expect *= 0.9;
        }
        let expect: Vec<bool> = (0..20).map(|t| (1..=6).contains(&t)).collect();
        assert_eq!(trace.stochastic, expect);
        assert_eq!(trace.switch_step(), Some(7));
    }

    #[test]
    fn small_theta_is_diverse_beam_search() {
        for seed in 0..10 {
            let mut s = RandomScorer::new(6, seed);
            s.eos = Some(5);
            let c = EdbsConfig {
                theta0: 0.4,
                max_steps: 8,
                seed,
                ..EdbsConfig::default()
            };
            let (hyps, trace) = edbs_search(&s, &c).unwrap();
            assert!(trace.stochastic.iter().all(|&b| !b));
            let dbs = diverse_beam_search(&s, 4, 2, 0.5, 8, 1.0).unwrap();
            assert_eq!(hyps, dbs);
        }
    }

    #[test]
    fn seeded_search_is_repeatable() {
        let mut s = RandomScorer::new(8, 1);
        s.scale = 0.3;
        let c = EdbsConfig {
            max_steps: 10,
            seed: 42,
            ..EdbsConfig::default()
        };
        assert_eq!(edbs_search(&s, &c).unwrap(), edbs_search(&s, &c).unwrap());
        let other = EdbsConfig {
            seed: 43,
            ..c.clone()
        };
        assert_ne!(
            edbs_search(&s, &c).unwrap().0,
            edbs_search(&s, &other).unwrap().0
        );
        let uniform = EdbsConfig {
            omega_mode: OmegaMode::Uniform,
            ..c
        };
        let (_, trace) = edbs_search(&s, &uniform).unwrap();
        assert!(trace.omegas.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn config_ranges() {
        let bad = |f: fn(&mut EdbsConfig)| {
            let mut c = EdbsConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(|c| c.omega = 1.5).contains("omega"));
        assert!(bad(|c| c.omega = 0.0).contains("omega"));
        assert!(bad(|c| c.decay = 1.0).contains("decay"));
        assert!(bad(|c| c.theta0 = 0.0).contains("theta0"));
        assert!(bad(|c| c.groups = 3).contains("groups"));
        assert!(bad(|c| c.augment_template = "x".into()).contains("augment_template"));
        EdbsConfig::default().validate().unwrap();
    }

    #[test]
    fn exact_mentions_are_a_fixed_point() {
        let v = vocab(&["头痛", "发热", "咳嗽"]);
        let text = "我头痛。还有发热吗？";
        let (out, report) = entity_revise(text, &set(&["头痛", "发热"]), &v, &cfg(1));
        assert_eq!(out, text);
        assert!(report.is_empty());
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn distant_mention_deletes_its_sentence() {
        let v = vocab(&["头痛", "咳嗽"]);
        let text = "有点咳嗽。头痛多久了？";
        let (out, report) = entity_revise(text, &set(&["头痛"]), &v, &cfg(1));
        assert_eq!(out, "头痛多久了？");
        assert_eq!(report.deleted.len(), 1);
        assert_eq!(report.deleted[0].sentence, "有点咳嗽。");
        assert_eq!(report.deleted[0].mention.as_deref(), Some("咳嗽"));
        assert_eq!(report.deleted[0].distance, Some(2));
        assert!(report.augmented.is_empty());
    }

    #[test]
    fn near_mention_survives_within_bound() {
        let v = vocab(&["胃炎", "肠炎"]);
        let (out, report) = entity_revise("可能是肠炎。", &set(&["胃炎"]), &v, &cfg(1));
        assert!(report.deleted.is_empty());
        assert_eq!(out, "可能是肠炎。关注：胃炎。");
        let (out, _) = entity_revise("可能是肠炎。", &set(&["胃炎"]), &v, &cfg(0));
        assert_eq!(out, "关注：胃炎。");
    }

    #[test]
    fn missing_entities_are_appended_once() {
        let v = vocab(&["头痛", "发热"]);
        let (out, report) = entity_revise("多喝水。", &set(&["头痛", "发热"]), &v, &cfg(1));
        assert_eq!(out, "多喝水。关注：发热、头痛。");
        assert_eq!(
            report.augmented,
            vec!["发热".to_string(), "头痛".to_string()]
        );
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn empty_prediction_deletes_every_mention() {
        let v = vocab(&["头痛"]);
        let (out, report) = entity_revise("头痛吗？多休息。", &EntitySet::new(), &v, &cfg(3));
        assert_eq!(out, "多休息。");
        assert_eq!(report.deleted[0].distance, None);
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn literal_order_can_lose_a_deleted_entity() {
        let v = vocab(&["头痛", "咳嗽"]);
        // The first sentence holds a predicted entity next to a distant one.
        let text = "头痛和咳嗽。休息。";
        let pred = set(&["头痛"]);
        let literal = EdbsConfig {
            recompute_after_delete: false,
            ..cfg(0)
        };
        let (out, report) = entity_revise(text, &pred, &v, &literal);
        assert_eq!(out, "休息。");
        assert_eq!(report.coverage, 0.0);
        let (out, report) = entity_revise(text, &pred, &v, &cfg(0));
        assert_eq!(out, "休息。关注：头痛。");
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn literal_mode_compares_whole_sentences() {
        let v = vocab(&["头痛"]);
        let c = EdbsConfig {
            revision: RevisionMode::Literal,
            ..cfg(2)
        };
        let (out, report) = entity_revise("头痛。很久很久了。", &set(&["头痛"]), &v, &c);
        assert_eq!(out, "头痛。");
        assert_eq!(report.deleted[0].mention, None);
        assert_eq!(report.deleted[0].distance, Some(6));
    }

    const NAMES: [&str; 6] = ["头痛", "头疼", "发热", "咳嗽", "胃炎", "腹泻"];
    const FILLER: [&str; 5] = ["我", "有点", "多久了", "吃药", "建议"];

    fn case() -> impl Strategy<Value = (String, Vec<usize>, usize)> {
        let piece = prop_oneof![
            (0usize..NAMES.len()).prop_map(|i| NAMES[i].to_string()),
            (0usize..FILLER.len()).prop_map(|i| FILLER[i].to_string()),
            prop::sample::select(vec!["。", "，", "？"]).prop_map(String::from),
        ];
        (
            prop::collection::vec(piece, 0..14).prop_map(|p| p.concat()),
            prop::collection::vec(0usize..NAMES.len(), 0..4),
            0usize..3,
        )
    }

    proptest! {
        #[test]
        fn revision_covers_and_is_sound((text, picks, limit) in case()) {
            let v = vocab(&NAMES);
            let pred: EntitySet = picks.iter().map(|&i| NAMES[i].to_string()).collect();
            let c = cfg(limit);
            let (out, report) = entity_revise(&text, &pred, &v, &c);
            for e in &pred {
                prop_assert!(out.contains(e.as_str()), "{e} missing from {out}");
            }
            prop_assert_eq!(report.coverage, 1.0);
            for s in split_sentences(&out, &c.delimiters) {
                for m in match_entities(&s, &v).mentions {
                    let d = min_distance(&m.entity, &pred);
                    prop_assert!(d.is_some_and(|d| d <= limit), "{} survives in {}", m.entity, out);
                }
            }
        }
    }
}
