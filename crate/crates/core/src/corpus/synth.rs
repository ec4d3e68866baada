//! Templated synthetic corpus over abstract entity names.
//!
//! Entity `ENT_i` (1-based) belongs to domain `(i - 1) % domains`. Domain 0
//! holds symptoms; every symptom is tied to one entity of each other domain,
//! and a doctor turn names exactly the entities tied to the patient's first
//! symptom, one templated sentence per domain.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialogue::{Dialogue, Speaker, Turn};
use super::vocab::{EntityVocabulary, DEFAULT_DOMAINS, MAX_ENTITIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dialogues: usize,
    pub entities: usize,
    pub domains: usize,
    /// Patient/doctor exchanges per dialogue are drawn from `1..=max_pairs`.
    pub max_pairs: usize,
    /// Probability that a doctor turn names a random entity of the right
    /// domain instead of the one tied to the symptom.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dialogues: 400,
            entities: 40,
            domains: DEFAULT_DOMAINS,
            max_pairs: 3,
            noise: 0.1,
            seed: 7,
        }
    }
}

const OPENING: [&str; 3] = [
    "I have {a}.",
    "I have {a} and {b}.",
    "{a} for days, what now?",
];
const FOLLOW_UP: [&str; 2] = ["Now {a}, is {p} ok?", "Also {a}."];
const DOCTOR: [[&str; 2]; 4] = [
    ["Has {x}.", "Likely {x}."],
    ["Take {x}.", "Use {x}."],
    ["Test {x}.", "Check {x}."],
    ["Avoid {x}.", "See {x}."],
];

pub fn entity_name(i: usize) -> String {
    format!("ENT_{i:03}")
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<(Vec<Dialogue>, EntityVocabulary)> {
    if cfg.domains == 0 || cfg.domains > DEFAULT_DOMAINS {
        return Err(Error::config(
            "domains",
            format!("must lie in 1..={DEFAULT_DOMAINS}"),
        ));
    }
    if cfg.entities > MAX_ENTITIES {
        return Err(Error::config("entities", format!("at most {MAX_ENTITIES}")));
    }
    if cfg.entities < cfg.domains {
        return Err(Error::config(
            "entities",
            "every domain needs at least one entity",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::config("noise", "must lie in [0, 1]"));
    }
    if cfg.max_pairs == 0 {
        return Err(Error::config("max_pairs", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (1..=cfg.entities).map(entity_name).collect();
    let by_domain: Vec<Vec<usize>> = (0..cfg.domains)
        .map(|d| (0..cfg.entities).filter(|i| i % cfg.domains == d).collect())
        .collect();
    let vocab = EntityVocabulary::new(
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i % cfg.domains))
            .collect::<BTreeMap<_, _>>(),
        cfg.domains,
    )?;

    // links[s][d - 1]: the domain-d entity tied to the s-th symptom.
    let symptoms = &by_domain[0];
    let mut links = vec![Vec::new(); symptoms.len()];
    for pool in by_domain.iter().skip(1).take(DOCTOR.len()) {
        let mut perm = pool.clone();
        perm.shuffle(&mut rng);
        for (s, link) in links.iter_mut().enumerate() {
            link.push(perm[s % perm.len()]);
        }
    }

    let mut corpus = Vec::with_capacity(cfg.dialogues);
    for n in 0..cfg.dialogues {
        let pairs = rng.random_range(1..=cfg.max_pairs);
        let mut turns = Vec::with_capacity(2 * pairs);
        let mut last_drug: Option<usize> = None;
        for pair in 0..pairs {
            let a = rng.random_range(0..symptoms.len());
            let mut b = rng.random_range(0..symptoms.len());
            if b == a && symptoms.len() > 1 {
                b = (b + 1) % symptoms.len();
            }
            let template = match (pair, last_drug) {
                (0, _) => OPENING[rng.random_range(0..OPENING.len())],
                (_, Some(_)) => FOLLOW_UP[rng.random_range(0..FOLLOW_UP.len())],
                (_, None) => FOLLOW_UP[1],
            };
            let mut ents = vec![symptoms[a]];
            let mut text = template.replace("{a}", &names[symptoms[a]]);
            if template.contains("{b}") {
                text = text.replace("{b}", &names[symptoms[b]]);
                ents.push(symptoms[b]);
            }
            if let (true, Some(p)) = (template.contains("{p}"), last_drug) {
                text = text.replace("{p}", &names[p]);
                ents.push(p);
            }
            turns.push(make_turn(Speaker::Patient, text, &ents, &names));

            let linked: Vec<usize> = links[a]
                .iter()
                .enumerate()
                .map(|(slot, &e)| {
                    if rng.random_bool(cfg.noise) {
                        let pool = &by_domain[slot + 1];
                        pool[rng.random_range(0..pool.len())]
                    } else {
                        e
                    }
                })
                .collect();
            let mut sentences = Vec::with_capacity(linked.len());
            for (slot, &e) in linked.iter().enumerate() {
                let choice = DOCTOR[slot][rng.random_range(0..2)];
                sentences.push(choice.replace("{x}", &names[e]));
            }
            if linked.is_empty() {
                sentences.push("Rest well.".to_string());
            }
            last_drug = linked.get(1).copied();
            turns.push(make_turn(
                Speaker::Doctor,
                sentences.join(" "),
                &linked,
                &names,
            ));
        }
        corpus.push(Dialogue {
            id: format!("syn-{n:05}"),
            turns,
        });
    }
    Ok((corpus, vocab))
}

fn make_turn(speaker: Speaker, text: String, ents: &[usize], names: &[String]) -> Turn {
    Turn {
        speaker,
        text,
        entities: ents.iter().map(|&i| names[i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::match_entities;

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            dialogues: 30,
            ..SynthConfig::default()
        };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic_corpus(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn exact_size_and_valid() {
        let cfg = SynthConfig {
            dialogues: 10,
            ..SynthConfig::default()
        };
        let (corpus, vocab) = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(corpus.len(), 10);
        assert_eq!(vocab.len(), 40);
        for d in &corpus {
            d.validate(&vocab).unwrap();
        }
    }

    #[test]
    fn annotations_recoverable_by_matching() {
        let (corpus, vocab) = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        for d in &corpus {
            for t in &d.turns {
                let found = match_entities(&t.text, &vocab).entities;
                for e in &t.entities {
                    assert!(found.contains(e), "{e} missing from {:?}", t.text);
                }
            }
        }
    }

    #[test]
    fn doctor_entities_follow_first_symptom() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let (corpus, _) = generate_synthetic_corpus(&cfg).unwrap();
        let mut seen: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for d in &corpus {
            for pair in d.turns.chunks(2) {
                let key = pair[0].entities[0].clone();
                let value = pair[1].entities.clone();
                assert_eq!(seen.entry(key).or_insert_with(|| value.clone()), &value);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_specs() {
        for cfg in [
            SynthConfig {
                entities: 161,
                ..SynthConfig::default()
            },
            SynthConfig {
                domains: 6,
                ..SynthConfig::default()
            },
            SynthConfig {
                entities: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                max_pairs: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                noise: 1.5,
                ..SynthConfig::default()
            },
        ] {
            assert!(generate_synthetic_corpus(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn single_domain_still_valid() {
        let cfg = SynthConfig {
            dialogues: 5,
            entities: 3,
            domains: 1,
            ..SynthConfig::default()
        };
        let (corpus, vocab) = generate_synthetic_corpus(&cfg).unwrap();
        for d in &corpus {
            d.validate(&vocab).unwrap();
        }
    }
}
