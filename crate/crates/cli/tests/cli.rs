use std::path::{Path, PathBuf};

use clap::Parser;
use medgen::pipeline::{Comparison, DecodeRecord};
use medgen_cli::{run, run_command, Cli};

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn medgen(config: &Path, args: &[&str]) -> anyhow::Result<String> {
    medgen_stdin(config, args, "")
}

fn medgen_stdin(config: &Path, args: &[&str], stdin: &str) -> anyhow::Result<String> {
    let mut argv = vec!["medgen", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv)?;
    let mut out = Vec::new();
    run(&cli, &mut std::io::Cursor::new(stdin.to_string()), &mut out)?;
    Ok(String::from_utf8(out)?)
}

const TINY: &str = r#"{
  "seed": 4,
  "paths": {"dir": "out"},
  "synth": {"dialogues": 40},
  "entity_train": {"epochs": 1},
  "gen_train": {"stages": [{"epochs": 1, "folds": 1}]},
  "decode": {"edbs": {"max_steps": 16}},
  "eval": {"max_items": 4}
}"#;

#[test]
fn paths_resolve_against_the_config_directory() {
    let (dir, cfg) = setup(TINY);
    medgen(&cfg, &["synth"]).unwrap();
    for f in [
        "corpus.jsonl",
        "vocab.json",
        "tokenizer.json",
        "synth.config.json",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn synth_is_deterministic_and_echoes_its_config() {
    let (a, ca) = setup(TINY);
    let (b, cb) = setup(TINY);
    medgen(&ca, &["synth"]).unwrap();
    medgen(&cb, &["synth", "--dialogues", "40"]).unwrap();
    for f in [
        "corpus.jsonl",
        "vocab.json",
        "tokenizer.json",
        "synth.config.json",
    ] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let echoed = medgen_cli::config::parse_config(&a.path().join("out/synth.config.json")).unwrap();
    assert_eq!(echoed.seed, Some(4));
    assert_eq!(echoed.synth.seed, 4);
    assert_eq!(echoed.paths.dir, PathBuf::from("out"));
}

#[test]
fn stochastic_commands_need_a_seed() {
    let (_d, cfg) = setup(r#"{"synth": {"dialogues": 10}}"#);
    let err = format!("{:#}", medgen(&cfg, &["synth"]).unwrap_err());
    assert!(err.contains("seed"), "{err}");
    medgen(&cfg, &["synth", "--seed", "2"]).unwrap();
}

#[test]
fn config_errors_name_the_key() {
    let (_d, cfg) = setup(r#"{"seed": 1, "decode": {"edbs": {"omega": 2.0}}}"#);
    let err = format!("{:#}", medgen(&cfg, &["synth"]).unwrap_err());
    assert!(err.contains("omega"), "{err}");
    let (_d, cfg) = setup(r#"{"seed": 1, "gen_train": {"bacth_size": 2}}"#);
    let err = format!("{:#}", medgen(&cfg, &["synth"]).unwrap_err());
    assert!(err.contains("bacth_size"), "{err}");
    let (_d, cfg) = setup(TINY);
    let err = format!(
        "{:#}",
        medgen(&cfg, &["synth", "--set", "decode.edbs.groups=3"]).unwrap_err()
    );
    assert!(err.contains("groups"), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(run_command(["medgen", "no-such-command"]), 2);
    let (_d, cfg) = setup(r#"{"decode": {"edbs": {"decay": 1.5}}}"#);
    assert_eq!(
        run_command(["medgen", "--config", cfg.to_str().unwrap(), "stats"]),
        1
    );
}

#[test]
fn evaluating_the_references_scores_100() {
    let (dir, cfg) = setup(TINY);
    medgen(&cfg, &["synth"]).unwrap();
    let out = dir.path().join("out");
    let corpus = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    let mut records = String::new();
    for line in corpus.lines() {
        let d: medgen::corpus::Dialogue = serde_json::from_str(line).unwrap();
        for t in d.target_turns() {
            let r = DecodeRecord {
                dialogue: d.id.clone(),
                turn: t,
                strategy: medgen::decode::Strategy::Greedy,
                seed: 0,
                predicted_entities: vec![],
                response: d.turns[t].text.clone(),
                candidates: vec![],
                revision_report: None,
                reference: d.turns[t].text.clone(),
            };
            records.push_str(&serde_json::to_string(&r).unwrap());
            records.push('\n');
        }
    }
    std::fs::write(out.join("decode.jsonl"), records).unwrap();
    let table = medgen(&cfg, &["evaluate"]).unwrap();
    assert!(table.contains("100.00"), "{table}");
    let report: medgen::metrics::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(
        (report.entity_f1, report.bleu_avg, report.avg_score),
        (100.0, 100.0, 100.0)
    );
    assert!(out.join("report.txt").exists());
}

#[test]
fn unknown_dialogues_fail_evaluation() {
    let (dir, cfg) = setup(TINY);
    medgen(&cfg, &["synth"]).unwrap();
    let r = r#"{"dialogue":"nope","turn":1,"strategy":"greedy","seed":0,"predicted_entities":[],"response":"x","candidates":[],"revision_report":null,"reference":"x"}"#;
    std::fs::write(dir.path().join("out/decode.jsonl"), format!("{r}\n")).unwrap();
    let err = format!("{:#}", medgen(&cfg, &["evaluate"]).unwrap_err());
    assert!(err.contains("nope"), "{err}");
}

/// Trains the tiny pipeline once and exercises every downstream command.
#[test]
fn trained_pipeline_commands() {
    let (dir, cfg) = setup(TINY);
    for cmd in [
        "synth",
        "train-entity",
        "search-thresholds",
        "train-gen",
        "decode",
    ] {
        medgen(&cfg, &[cmd]).unwrap();
    }
    let out = dir.path().join("out");

    let decoded = std::fs::read_to_string(out.join("decode.jsonl")).unwrap();
    let records: Vec<DecodeRecord> = decoded
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.revision_report.is_some()));

    medgen(
        &cfg,
        &[
            "decode",
            "--strategy",
            "beam",
            "--output",
            out.join("beam.jsonl").to_str().unwrap(),
        ],
    )
    .unwrap();
    let beam = std::fs::read_to_string(out.join("beam.jsonl")).unwrap();
    assert!(beam.lines().all(|l| l.contains(r#""strategy":"beam""#)));

    let table = medgen(&cfg, &["compare-decoders"]).unwrap();
    assert_eq!(table.lines().count(), 8, "{table}");
    let cmp: Comparison =
        serde_json::from_str(&std::fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(cmp.rows.len(), 7);
    assert_eq!(cmp.items, 4);

    let requests = dir.path().join("requests.jsonl");
    std::fs::write(
        &requests,
        "{\"id\": \"r1\", \"turns\": [{\"speaker\": \"patient\", \"text\": \"I have ENT_001.\"}]}\n",
    )
    .unwrap();
    medgen(&cfg, &["decode", "--request", requests.to_str().unwrap()]).unwrap();
    let responses = std::fs::read_to_string(out.join("responses.jsonl")).unwrap();
    assert_eq!(responses.lines().count(), 1);
    assert!(responses.contains(r#""id":"r1""#));

    let transcript = medgen_stdin(
        &cfg,
        &["chat"],
        "I have ENT_002.\n:reset\nAlso ENT_003.\n:quit\nignored\n",
    )
    .unwrap();
    assert_eq!(transcript.matches("doctor:").count(), 2, "{transcript}");
    assert!(transcript.contains("(new dialogue)"));
}
