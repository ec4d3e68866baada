use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use medgen::corpus::{corpus_stats, corpus_totals, Dialogue, EntitySet, Speaker, Turn};
use medgen::decode::{decode_response, RevisionReport, Strategy};
use medgen::entity::{
    entity_examples, inverse_frequency_weights, tune_thresholds, EntityPredictor, ThresholdVector,
};
use medgen::generator::FusionInput;
use medgen::metrics::{evaluate_corpus, render_table, Reference};
use medgen::pipeline::{compare_decoders, decode_corpus, item_seed, DecodeRecord, Generator};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    corpus_bytes, json_bytes, jsonl_bytes, read_json, tokenizer_bytes, vocab_bytes, write_atomic,
    EntityModelFile, GeneratorFile,
};
use crate::config::{Conditioning, Loaded};
use crate::stages::{self, Data};

/// Writes the effective config next to a command's artifacts.
fn echo_config(l: &Loaded, command: &str) -> Result<()> {
    write_atomic(
        &l.dir().join(format!("{command}.config.json")),
        &json_bytes(&l.config)?,
    )
}

pub fn synth(l: &mut Loaded) -> Result<()> {
    l.config.synth.seed = l.config.seed()?;
    let data = Data::synthetic(&l.config, l.config.synth.seed)?;
    let p = &l.config.paths;
    write_atomic(&l.path(&p.corpus), &corpus_bytes(&data.corpus)?)?;
    write_atomic(&l.path(&p.vocab), &vocab_bytes(&data.vocab)?)?;
    write_atomic(&l.path(&p.tokenizer), &tokenizer_bytes(&data.tok)?)?;
    echo_config(l, "synth")?;
    info!(
        "wrote {} dialogues, {} entities",
        data.corpus.len(),
        data.vocab.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct StatsFile {
    corpus: medgen::corpus::CorpusStats,
    totals: medgen::corpus::CorpusTotals,
    entity_classes: usize,
    tokenizer_vocab: usize,
}

pub fn stats(l: &Loaded, out: &mut dyn Write) -> Result<()> {
    // Splits are not needed; any seed gives the same corpus.
    let data = Data::load(l, 0)?;
    let file = StatsFile {
        corpus: corpus_stats(&data.corpus),
        totals: corpus_totals(&data.corpus),
        entity_classes: data.vocab.len(),
        tokenizer_vocab: data.tok.vocab_size(),
    };
    let s = &file.corpus;
    writeln!(out, "dialogues            {}", s.dialogues)?;
    writeln!(out, "utterances           {}", s.utterances)?;
    writeln!(out, "chars/dialogue       {:.2}", s.chars_per_dialogue)?;
    writeln!(out, "chars/utterance      {:.2}", s.chars_per_utterance)?;
    writeln!(out, "entities/dialogue    {:.2}", s.entities_per_dialogue)?;
    writeln!(out, "entities/utterance   {:.2}", s.entities_per_utterance)?;
    write_atomic(&l.dir().join("stats.json"), &json_bytes(&file)?)?;
    echo_config(l, "stats")
}

pub fn train_entity(l: &Loaded) -> Result<()> {
    let seed = l.config.seed()?;
    let data = Data::load(l, seed)?;
    let t = stages::train_entity(&l.config, &data, seed)?;
    let p = &l.config.paths;
    let model = EntityModelFile::new(&t.scorer, l.config.history_turns);
    write_atomic(&l.path(&p.entity_model), &json_bytes(&model)?)?;
    write_atomic(&l.path(&p.thresholds), &json_bytes(&t.thresholds)?)?;
    write_atomic(&l.dir().join("entity_report.json"), &json_bytes(&t.report)?)?;
    echo_config(l, "train-entity")?;
    info!(
        "entity micro F1 {:.4} searched, {:.4} uniform",
        t.report.searched.f1, t.report.uniform.f1
    );
    Ok(())
}

fn load_predictor(l: &Loaded, data: &Data) -> Result<EntityPredictor> {
    let p = &l.config.paths;
    let file: EntityModelFile = read_json(&l.path(&p.entity_model))?;
    let thresholds: ThresholdVector = read_json(&l.path(&p.thresholds))?;
    Ok(stages::predictor(
        file.scorer()?,
        thresholds,
        data,
        file.history_turns,
    ))
}

pub fn search_thresholds(l: &Loaded) -> Result<()> {
    let seed = l.config.seed()?;
    let data = Data::load(l, seed)?;
    let file: EntityModelFile = read_json(&l.path(&l.config.paths.entity_model))?;
    let scorer = file.scorer()?;
    let train = entity_examples(&data.train, &data.vocab, &data.tok, file.history_turns)?;
    let valid = entity_examples(&data.valid, &data.vocab, &data.tok, file.history_turns)?;
    let labels: Vec<Vec<bool>> = train.iter().map(|e| e.labels.clone()).collect();
    let weights = inverse_frequency_weights(&labels, data.vocab.len());
    let tuned = tune_thresholds(&scorer, &valid, &l.config.entity_train.grid, weights)?;
    write_atomic(
        &l.path(&l.config.paths.thresholds),
        &json_bytes(&tuned.thresholds)?,
    )?;
    write_atomic(
        &l.dir().join("threshold_report.json"),
        &json_bytes(&tuned.report)?,
    )?;
    echo_config(l, "search-thresholds")
}

fn load_generator(l: &Loaded) -> Result<Generator> {
    let file: GeneratorFile = read_json(&l.path(&l.config.paths.generator))?;
    file.generator()
}

/// The predictor, when the chosen conditioning needs one.
fn predictor_for(l: &Loaded, data: &Data, c: Conditioning) -> Result<Option<EntityPredictor>> {
    match c {
        Conditioning::Gold => Ok(None),
        Conditioning::Predicted => load_predictor(l, data).map(Some),
    }
}

pub fn train_gen(l: &Loaded) -> Result<()> {
    let seed = l.config.seed()?;
    let data = Data::load(l, seed)?;
    let predictor = predictor_for(l, &data, l.config.train_conditioning)?;
    let (generator, report) = stages::train_gen(&l.config, &data, predictor.as_ref(), seed)?;
    write_atomic(
        &l.path(&l.config.paths.generator),
        &json_bytes(&GeneratorFile::new(&generator))?,
    )?;
    write_atomic(
        &l.dir().join("generator_report.json"),
        &json_bytes(&report)?,
    )?;
    echo_config(l, "train-gen")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestTurn {
    speaker: Speaker,
    text: String,
}

/// A dialogue history awaiting the next doctor turn.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    #[serde(default)]
    id: Option<String>,
    turns: Vec<RequestTurn>,
}

#[derive(Debug, Serialize)]
struct Response {
    id: Option<String>,
    strategy: Strategy,
    seed: u64,
    predicted_entities: Vec<String>,
    response: String,
    candidates: Vec<String>,
    revision_report: Option<RevisionReport>,
}

/// Everything needed to answer one dialogue history.
struct Responder {
    predictor: EntityPredictor,
    generator: Generator,
    data_vocab: medgen::corpus::EntityVocabulary,
    tok: medgen::corpus::Tokenizer,
    history_turns: usize,
}

impl Responder {
    fn load(l: &Loaded) -> Result<Self> {
        let p = &l.config.paths;
        let vocab = medgen::corpus::EntityVocabulary::load(&l.path(&p.vocab))?;
        let tok = medgen::corpus::Tokenizer::load(&l.path(&p.tokenizer))?;
        let file: EntityModelFile = read_json(&l.path(&p.entity_model))?;
        let thresholds: ThresholdVector = read_json(&l.path(&p.thresholds))?;
        let predictor = EntityPredictor {
            scorer: file.scorer()?,
            thresholds,
            vocab: vocab.clone(),
            tokenizer: tok.clone(),
            history_turns: file.history_turns,
        };
        Ok(Responder {
            predictor,
            generator: load_generator(l)?,
            data_vocab: vocab,
            tok,
            history_turns: l.config.history_turns,
        })
    }

    /// Predicts entities for the turn after `history` and decodes it.
    fn respond(
        &self,
        history: &[Turn],
        strategy: Strategy,
        cfg: &medgen::decode::DecodeConfig,
        seed: u64,
    ) -> Result<(EntitySet, medgen::decode::DecodeOutcome)> {
        if history.is_empty() {
            bail!("empty dialogue history");
        }
        let mut turns = history.to_vec();
        turns.push(Turn::new(Speaker::Doctor, "?", &[]));
        let d = Dialogue {
            id: "request".into(),
            turns,
        };
        let target = d.turns.len() - 1;
        let predicted = self.predictor.predict(&d, target)?;
        let ctx =
            medgen::corpus::linearize_context(&d, target, self.history_turns, false, &self.tok)?;
        let input = FusionInput::new(&ctx, &predicted, &self.tok);
        let scorer = self.generator.scorer(&input)?;
        let out = decode_response(
            &scorer,
            strategy,
            &predicted,
            &self.data_vocab,
            &self.tok,
            cfg,
            seed,
        )?;
        Ok((predicted, out))
    }
}

pub fn decode(l: &Loaded, request: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let seed = l.config.seed()?;
    let strategy = l.config.strategy;
    match request {
        None => {
            let data = Data::load(l, seed)?;
            let predictor = predictor_for(l, &data, l.config.decode_conditioning)?;
            let items = stages::test_items(&l.config, &data, predictor.as_ref())?;
            let generator = load_generator(l)?;
            let records = decode_corpus(
                &generator,
                &items,
                &data.vocab,
                &data.tok,
                strategy,
                &l.config.decode,
                seed,
            )?;
            let path = output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| l.path(&l.config.paths.decode_output));
            write_atomic(&path, &jsonl_bytes(&records)?)?;
            info!("decoded {} responses with {}", records.len(), strategy);
        }
        Some(req) => {
            let responder = Responder::load(l)?;
            let text = std::fs::read_to_string(req)
                .with_context(|| format!("reading {}", req.display()))?;
            let mut rows = Vec::new();
            for (i, line) in text.lines().filter(|s| !s.trim().is_empty()).enumerate() {
                let r: Request = serde_json::from_str(line)
                    .with_context(|| format!("{}: request {}", req.display(), i + 1))?;
                let history: Vec<Turn> = r
                    .turns
                    .into_iter()
                    .map(|t| Turn::new(t.speaker, t.text, &[]))
                    .collect();
                let s = item_seed(seed, i);
                let (predicted, out) =
                    responder.respond(&history, strategy, &l.config.decode, s)?;
                rows.push(Response {
                    id: r.id,
                    strategy,
                    seed: s,
                    predicted_entities: predicted.into_iter().collect(),
                    response: out.response,
                    candidates: out.candidates,
                    revision_report: out.revision,
                });
            }
            let path = output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| l.dir().join("responses.jsonl"));
            write_atomic(&path, &jsonl_bytes(&rows)?)?;
        }
    }
    echo_config(l, "decode")
}

fn report_paths(l: &Loaded, stem: &str) -> (PathBuf, PathBuf) {
    (
        l.path(&format!("{stem}.json")),
        l.path(&format!("{stem}.txt")),
    )
}

pub fn evaluate(l: &Loaded, input: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    // Evaluation reads gold turns directly, so the split seed is irrelevant.
    let data = Data::load(l, 0)?;
    let path = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| l.path(&l.config.paths.decode_output));
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<DecodeRecord> = text
        .lines()
        .filter(|s| !s.trim().is_empty())
        .enumerate()
        .map(|(i, s)| {
            serde_json::from_str(s).with_context(|| format!("{}: record {}", path.display(), i + 1))
        })
        .collect::<Result<_>>()?;
    let index: HashMap<&str, &Dialogue> = data.corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let refs = records
        .iter()
        .map(|r| {
            let turn = index
                .get(r.dialogue.as_str())
                .and_then(|d| d.turns.get(r.turn))
                .with_context(|| format!("no turn {} in dialogue {:?}", r.turn, r.dialogue))?;
            Ok(Reference {
                text: turn.text.clone(),
                entities: turn.entity_set(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<String> = records.iter().map(|r| r.response.clone()).collect();
    let report = evaluate_corpus(&outputs, &refs, &data.vocab)?;
    let label = records
        .first()
        .map(|r| r.strategy.label(&l.config.decode))
        .unwrap_or_else(|| "-".into());
    let table = render_table(&[(label, &report)]);
    out.write_all(table.as_bytes())?;
    let (json, txt) = report_paths(l, &l.config.paths.report);
    write_atomic(&json, &json_bytes(&report)?)?;
    write_atomic(&txt, table.as_bytes())?;
    echo_config(l, "evaluate")
}

pub fn compare(l: &Loaded, out: &mut dyn Write) -> Result<()> {
    let seed = l.config.seed()?;
    let data = Data::load(l, seed)?;
    let predictor = predictor_for(l, &data, l.config.decode_conditioning)?;
    let items = stages::test_items(&l.config, &data, predictor.as_ref())?;
    let generator = load_generator(l)?;
    let cmp = compare_decoders(
        &generator,
        &items,
        &data.vocab,
        &data.tok,
        &l.config.eval.strategies,
        &l.config.decode,
        seed,
    )?;
    let table = cmp.table();
    out.write_all(table.as_bytes())?;
    write_atomic(&l.dir().join("compare.json"), &json_bytes(&cmp)?)?;
    write_atomic(&l.dir().join("compare.txt"), table.as_bytes())?;
    echo_config(l, "compare-decoders")
}

/// Line-oriented chat: each input line is a patient turn. `:reset` starts
/// a new dialogue, `:quit` ends the session.
pub fn chat(l: &Loaded, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let seed = l.config.seed()?;
    let responder = Responder::load(l)?;
    let mut history: Vec<Turn> = Vec::new();
    let mut step = 0;
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            ":quit" => break,
            ":reset" => {
                history.clear();
                writeln!(out, "(new dialogue)")?;
                continue;
            }
            _ => {}
        }
        history.push(Turn::new(Speaker::Patient, text, &[]));
        let (predicted, reply) = responder.respond(
            &history,
            Strategy::Edbs,
            &l.config.decode,
            item_seed(seed, step),
        )?;
        step += 1;
        let names: Vec<&str> = predicted.iter().map(String::as_str).collect();
        writeln!(out, "doctor: {}", reply.response)?;
        writeln!(out, "  entities: [{}]", names.join(", "))?;
        if let Some(r) = reply.revision.filter(|r| !r.is_empty()) {
            writeln!(out, "  revision: {}", serde_json::to_string(&r)?)?;
        }
        out.flush()?;
        history.push(Turn::new(Speaker::Doctor, reply.response, &[]));
    }
    Ok(())
}
