//! Command-line driver for the dialogue generation pipeline.
//!
//! Every command reads one JSON config (see [`config::PipelineConfig`]),
//! resolves artifact paths against the config file's directory and writes
//! its effective config beside the artifacts it produces.

pub mod artifacts;
mod commands;
pub mod config;
pub mod stages;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use medgen::decode::Strategy;

use config::{apply_override, parse_config, Loaded, PipelineConfig};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book {}

#[derive(Debug, Parser)]
#[command(
    name = "medgen",
    version,
    about = "Entity-aware medical dialogue generation"
)]
pub struct Cli {
    /// JSON config file; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set decode.edbs.omega=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory, overriding `paths.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with its vocabularies.
    Synth {
        #[arg(long)]
        dialogues: Option<usize>,
    },
    /// Print and save corpus statistics.
    Stats,
    /// Train the entity predictor and tune its thresholds.
    TrainEntity,
    /// Re-tune thresholds for a saved entity predictor.
    SearchThresholds,
    /// Train the response generator.
    TrainGen,
    /// Decode the test split, or the histories in a request file.
    Decode {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// JSONL of `{"id", "turns": [{"speaker", "text"}]}` records.
        #[arg(long, value_name = "PATH")]
        request: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Score a decode output against the corpus.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Decode the test split with every configured strategy.
    CompareDecoders {
        #[arg(long)]
        max_items: Option<usize>,
    },
    /// Interactive session on stdin.
    Chat,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Stats => "stats",
            Command::TrainEntity => "train-entity",
            Command::SearchThresholds => "search-thresholds",
            Command::TrainGen => "train-gen",
            Command::Decode { .. } => "decode",
            Command::Evaluate { .. } => "evaluate",
            Command::CompareDecoders { .. } => "compare-decoders",
            Command::Chat => "chat",
        }
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

/// Builds the effective config from the file, the overrides and the flags.
pub fn load(cli: &Cli) -> Result<Loaded> {
    let (mut config, base) = match &cli.config {
        Some(path) => {
            let base = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            (parse_config(path)?, base.to_path_buf())
        }
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    for o in &cli.overrides {
        config = apply_override(&config, o)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let mut loaded = Loaded { config, base };
    if let Some(dir) = &cli.dir {
        loaded.base = PathBuf::from(".");
        loaded.config.paths.dir = dir.clone();
    }
    match &cli.command {
        Command::Synth { dialogues: Some(n) } => loaded.config.synth.dialogues = *n,
        Command::Decode {
            strategy: Some(s), ..
        } => loaded.config.strategy = *s,
        Command::CompareDecoders { max_items: Some(n) } => loaded.config.eval.max_items = Some(*n),
        _ => {}
    }
    loaded.config.validate()?;
    Ok(loaded)
}

/// Runs a parsed command with explicit standard streams.
pub fn run(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut l = load(cli)?;
    let r = match &cli.command {
        Command::Synth { .. } => commands::synth(&mut l),
        Command::Stats => commands::stats(&l, out),
        Command::TrainEntity => commands::train_entity(&l),
        Command::SearchThresholds => commands::search_thresholds(&l),
        Command::TrainGen => commands::train_gen(&l),
        Command::Decode {
            request, output, ..
        } => commands::decode(&l, request.as_deref(), output.as_deref()),
        Command::Evaluate { input: path } => commands::evaluate(&l, path.as_deref(), out),
        Command::CompareDecoders { .. } => commands::compare(&l, out),
        Command::Chat => commands::chat(&l, input, out),
    };
    r.with_context(|| format!("{} failed", cli.command.name()))
}

/// Parses `argv` (program name first) and runs it on the process streams.
/// Returns the exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    match run(&cli, &mut stdin.lock(), &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
