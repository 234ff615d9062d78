mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use env_logger::Env;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(version, about = "Train and run entity-aware summarization models")]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for initialization, shuffling, dropout and gradient checks
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Decoding profile
    #[arg(long, global = true, value_parser = ["cnndm", "xsum"])]
    profile: Option<String>,

    /// Non-improving validations before early stopping
    #[arg(long, global = true, value_name = "N")]
    patience: Option<usize>,

    #[arg(long = "alpha-ot", global = true, value_name = "REAL")]
    alpha_ot: Option<f64>,

    #[arg(long = "alpha-anig", global = true, value_name = "REAL")]
    alpha_anig: Option<f64>,

    #[arg(long = "alpha-je", global = true, value_name = "REAL")]
    alpha_je: Option<f64>,

    /// Normalize whitespace in generated summaries
    #[arg(long, global = true)]
    normalize: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize annotated documents into training examples
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints plus an epoch log
    Train(TrainArgs),
    /// Summarize documents, one per input line
    Generate(GenerateArgs),
    /// ROUGE report for candidate summaries against references
    Score(ScoreArgs),
    /// Finite-difference check of every loss term on a small seeded model
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Annotated JSONL
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Reuse this merge table instead of learning one
    #[arg(long, value_name = "PATH")]
    merge_table: Option<PathBuf>,
    /// Merge rules to learn
    #[arg(long, value_name = "N")]
    merges: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,
    /// Validation examples; without them training runs every epoch
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    merge_table: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    merge_table: Option<PathBuf>,
    /// Whitespace-tokenized documents, one per line
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long, value_name = "PATH")]
    candidates: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    references: Option<PathBuf>,
    /// Report destination; stdout when absent
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Largest allowed relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn effective_config(cli: &mut Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = &cli.profile {
        cfg.profile = Some(p.clone());
    }
    if let Some(p) = cli.patience {
        cfg.train.patience = p;
    }
    if let Some(a) = cli.alpha_ot {
        cfg.train.alphas.ot = a;
    }
    if let Some(a) = cli.alpha_anig {
        cfg.train.alphas.anig = a;
    }
    if let Some(a) = cli.alpha_je {
        cfg.train.alphas.je = a;
    }
    cfg.normalize |= cli.normalize;

    let paths = &mut cfg.paths;
    match &mut cli.command {
        Command::Prepare(a) => {
            override_path(&mut paths.annotated, a.input.take());
            override_path(&mut paths.output_dir, a.out_dir.take());
            override_path(&mut paths.merge_table, a.merge_table.take());
            if let Some(n) = a.merges {
                cfg.merges = n;
            }
        }
        Command::Train(a) => {
            override_path(&mut paths.train_examples, a.examples.take());
            override_path(&mut paths.val_examples, a.val.take());
            override_path(&mut paths.merge_table, a.merge_table.take());
            override_path(&mut paths.output_dir, a.out_dir.take());
        }
        Command::Generate(a) => {
            override_path(&mut paths.checkpoint, a.checkpoint.take());
            override_path(&mut paths.merge_table, a.merge_table.take());
            override_path(&mut paths.input, a.input.take());
            override_path(&mut paths.output, a.output.take());
        }
        Command::Score(a) => {
            override_path(&mut paths.candidates, a.candidates.take());
            override_path(&mut paths.references, a.references.take());
            override_path(&mut paths.output, a.output.take());
        }
        Command::Gradcheck(_) => {}
    }
    Ok(cfg)
}

fn run(mut cli: Cli) -> Result<ExitCode> {
    let cfg = effective_config(&mut cli)?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Generate(_) => commands::generate(&cfg),
        Command::Score(_) => commands::score(&cfg),
        Command::Gradcheck(a) => return commands::gradcheck(&cfg, a.step, a.tolerance),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("INFOSUM_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
