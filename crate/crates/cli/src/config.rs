use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use medgen::corpus::SynthConfig;
use medgen::decode::{DecodeConfig, Strategy};
use medgen::entity::{EntityModelConfig, EntityTrainConfig};
use medgen::generator::{FusionConfig, GenTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Artifact locations. File names are joined onto `dir`, which is itself
/// resolved against the config file's directory when relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dir: PathBuf,
    pub corpus: String,
    pub vocab: String,
    pub tokenizer: String,
    pub entity_model: String,
    pub thresholds: String,
    pub generator: String,
    pub decode_output: String,
    pub report: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dir: PathBuf::from("."),
            corpus: "corpus.jsonl".into(),
            vocab: "vocab.json".into(),
            tokenizer: "tokenizer.json".into(),
            entity_model: "entity_model.json".into(),
            thresholds: "thresholds.json".into(),
            generator: "generator.json".into(),
            decode_output: "decode.jsonl".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of dialogues held out; half validates, half tests.
    pub holdout: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { holdout: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Gold,
    #[default]
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decode at most this many test responses.
    pub max_items: Option<usize>,
    pub strategies: Vec<Strategy>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_items: None,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Required by every command that draws random numbers.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    /// Turns of history fed to both models.
    pub history_turns: usize,
    pub entity_model: EntityModelConfig,
    pub entity_train: EntityTrainConfig,
    pub generator: FusionConfig,
    pub gen_train: GenTrainConfig,
    /// Entity set the generator is conditioned on while training.
    pub train_conditioning: Conditioning,
    /// Entity set the generator is conditioned on while decoding.
    pub decode_conditioning: Conditioning,
    pub strategy: Strategy,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            seed: None,
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            history_turns: 1,
            entity_model: EntityModelConfig::default(),
            entity_train: EntityTrainConfig::default(),
            generator: FusionConfig::default(),
            gen_train: GenTrainConfig::default(),
            train_conditioning: Conditioning::Gold,
            decode_conditioning: Conditioning::Predicted,
            strategy: Strategy::Edbs,
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, r: medgen::Result<()>| r.map_err(|e| anyhow!("{key}: {e}"));
        named("decode", self.decode.validate())?;
        named("generator", self.generator.validate())?;
        named("gen_train", self.gen_train.validate())?;
        named("entity_model", self.entity_model.validate())?;
        named("entity_train", self.entity_train.validate())?;
        if !(self.split.holdout > 0.0 && self.split.holdout < 1.0) {
            bail!("split.holdout: {} is outside (0, 1)", self.split.holdout);
        }
        if !(0.0..=1.0).contains(&self.synth.noise) {
            bail!("synth.noise: must lie in [0, 1]");
        }
        if self.gen_train.history_turns != self.history_turns {
            bail!(
                "gen_train.history_turns: must equal history_turns ({})",
                self.history_turns
            );
        }
        if self.eval.strategies.is_empty() {
            bail!("eval.strategies: must name at least one strategy");
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            anyhow!("seed: required for this command (set it in the config or pass --seed)")
        })
    }
}

/// A config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn path(&self, name: &str) -> PathBuf {
        self.base.join(&self.config.paths.dir).join(name)
    }

    pub fn dir(&self) -> PathBuf {
        self.base.join(&self.config.paths.dir)
    }
}

/// Reads, defaults and validates a config file.
pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: PipelineConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

/// Applies a `key.path=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(config: &PipelineConfig, assignment: &str) -> Result<PipelineConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut tree = serde_json::to_value(config)?;
    let mut node = &mut tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("{key}: {} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value.clone());
            break;
        }
        let child = obj.entry(part.to_string()).or_insert(Value::Null);
        if child.is_null() {
            *child = Value::Object(Default::default());
        }
        node = child;
    }
    serde_json::from_value(tree).with_context(|| format!("invalid override {key}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn paths_only_gets_defaults() {
        let (_d, p) = write(r#"{"paths": {"dir": "run"}}"#);
        let c = parse_config(&p).unwrap();
        assert_eq!(c.paths.dir, PathBuf::from("run"));
        assert_eq!(c.decode, DecodeConfig::default());
        assert_eq!(c.gen_train, GenTrainConfig::default());
        assert_eq!(c.strategy, Strategy::Edbs);
        assert_eq!(c.history_turns, 1);
        assert_eq!(c.seed, None);
    }

    #[test]
    fn omega_out_of_range_names_omega() {
        let (_d, p) = write(r#"{"decode": {"edbs": {"omega": 1.5}}}"#);
        let err = format!("{:#}", parse_config(&p).unwrap_err());
        assert!(err.contains("omega"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let (_d, p) = write(r#"{"decode": {"edbs": {"omgea": 0.5}}}"#);
        let err = format!("{:#}", parse_config(&p).unwrap_err());
        assert!(err.contains("omgea"), "{err}");
    }

    #[test]
    fn effective_config_round_trips() {
        let c = PipelineConfig {
            seed: Some(3),
            ..PipelineConfig::default()
        };
        let c = apply_override(&c, "decode.edbs.beam_width=6").unwrap();
        let c = apply_override(&c, "decode.edbs.groups=3").unwrap();
        let (_d, p) = write(&serde_json::to_string_pretty(&c).unwrap());
        assert_eq!(parse_config(&p).unwrap(), c);
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let c = PipelineConfig::default();
        assert_eq!(
            apply_override(&c, "strategy=beam").unwrap().strategy,
            Strategy::Beam
        );
        assert_eq!(apply_override(&c, "seed=9").unwrap().seed, Some(9));
        assert_eq!(
            apply_override(&c, "paths.dir=out").unwrap().paths.dir,
            PathBuf::from("out")
        );
        assert!(apply_override(&c, "decode.edbs.nope=1").is_err());
        assert!(apply_override(&c, "seed").is_err());
    }
}
