use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use infosum::atomic::write_atomic;
use infosum::corpus::{
    build_example, filter_entities, load_annotated, load_examples, truncate_with_eos,
    write_examples, EntityFilter, TrainingExample,
};
use infosum::diagnostics::{check_config, check_loss_terms, synthetic_example};
use infosum::evalsuite::{normalize_whitespace, score_corpus};
use infosum::model::{beam_search, init_params, ModelConfig, ModelParams};
use infosum::tokenizer::{decode, encode_words, train_merges, MergeTable};
use infosum::trainer::{self, OutputDir};
use serde_json::json;

use crate::config::RunConfig;

pub const MERGES_FILE: &str = "merges.json";
pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
        .with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let input = cfg.require(&cfg.paths.annotated, "annotated input")?;
    let out_dir = cfg.require(&cfg.paths.output_dir, "output directory")?;
    let report = load_annotated(input).with_context(|| format!("loading {}", input.display()))?;
    if report.documents.is_empty() {
        bail!("{} holds no usable documents", input.display());
    }
    let filter = EntityFilter::default();
    let docs: Vec<_> = report.documents.iter().map(|d| filter_entities(d, &filter)).collect();

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let table = match &cfg.paths.merge_table {
        Some(path) => MergeTable::load(path)
            .with_context(|| format!("loading merge table {}", path.display()))?,
        None => {
            let words: Vec<Vec<String>> = docs
                .iter()
                .flat_map(|d| [d.doc_words.clone(), d.summary_words.clone()])
                .collect();
            let table = train_merges(&words, cfg.merges)?;
            let path = out_dir.join(MERGES_FILE);
            table.save(&path)?;
            log::info!(
                "learned {} merges, vocabulary {}, wrote {}",
                table.merges().len(),
                table.vocab_size(),
                path.display()
            );
            table
        }
    };

    let mut examples = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        match build_example(doc, &table, cfg.limits) {
            Ok(ex) => examples.push(ex),
            Err(e) => log::warn!("document {}: skipped: {e}", i + 1),
        }
    }
    let path = out_dir.join(EXAMPLES_FILE);
    write_atomic(&path, |w| write_examples(w, &examples).map_err(std::io::Error::other))
        .with_context(|| format!("writing {}", path.display()))?;
    log::info!(
        "{} examples written to {} ({} records rejected, {} documents skipped)",
        examples.len(),
        path.display(),
        report.rejected.len(),
        docs.len() - examples.len()
    );
    Ok(())
}

fn load_example_file(path: &Path) -> Result<Vec<TrainingExample>> {
    load_examples(path).with_context(|| format!("loading examples {}", path.display()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let table_path = cfg.require(&cfg.paths.merge_table, "merge table")?;
    let table = MergeTable::load(table_path)
        .with_context(|| format!("loading merge table {}", table_path.display()))?;
    let examples = load_example_file(cfg.require(&cfg.paths.train_examples, "training examples")?)?;
    let val = match &cfg.paths.val_examples {
        Some(p) => load_example_file(p)?,
        None => Vec::new(),
    };
    let out_dir = cfg.require(&cfg.paths.output_dir, "output directory")?;

    let mut model = cfg.model.clone();
    model.vocab_size = table.vocab_size();
    for (i, ex) in examples.iter().chain(&val).enumerate() {
        if ex.source.len() > model.max_source_len || ex.teacher_inputs.len() > model.max_summary_len {
            bail!(
                "example {} has lengths ({}, {}) beyond the model's ({}, {})",
                i + 1,
                ex.source.len(),
                ex.teacher_inputs.len(),
                model.max_source_len,
                model.max_summary_len
            );
        }
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let effective = RunConfig {
        model: model.clone(),
        ..cfg.clone()
    };
    write_text(&out_dir.join(RUN_CONFIG_FILE), &serde_json::to_string_pretty(&effective)?)?;

    let params = init_params(&model)?;
    log::info!(
        "training {} parameters on {} examples ({} for validation)",
        params.count(),
        examples.len(),
        val.len()
    );
    let outcome = trainer::train(
        &examples,
        &val,
        &table,
        &cfg.train,
        params,
        &OutputDir(Some(out_dir.to_path_buf())),
    )?;
    if outcome.stopped_early {
        log::info!("stopped early after {} epochs", outcome.log.len());
    }
    if let Some((epoch, _)) = &outcome.best {
        log::info!("best validation at epoch {epoch}");
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.require(&cfg.paths.checkpoint, "checkpoint")?;
    let params =
        ModelParams::load_file(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let table_path = cfg.require(&cfg.paths.merge_table, "merge table")?;
    let table = MergeTable::load(table_path)
        .with_context(|| format!("loading merge table {}", table_path.display()))?;
    if table.vocab_size() != params.config.vocab_size {
        bail!(
            "merge table vocabulary {} does not match the checkpoint's {}",
            table.vocab_size(),
            params.config.vocab_size
        );
    }
    let input = cfg.require(&cfg.paths.input, "input documents")?;
    let output = cfg.require(&cfg.paths.output, "output file")?;

    let mut beam = cfg.beam_settings()?;
    log::info!(
        "beam settings: max_len {}, min_len {}, beams {}, length_penalty {}",
        beam.max_len,
        beam.min_len,
        beam.beams,
        beam.length_penalty
    );
    let cap = params.config.max_summary_len;
    if beam.max_len > cap {
        log::warn!("max_len {} exceeds the model's summary capacity; decoding at most {cap}", beam.max_len);
        beam.max_len = cap;
        beam.min_len = beam.min_len.min(cap);
    }

    let sp = table.specials();
    let mut summaries = Vec::new();
    for line in read_lines(input)? {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            summaries.push(String::new());
            continue;
        }
        let (ids, _) = encode_words(&words, &table);
        let source = truncate_with_eos(&ids, params.config.max_source_len, sp.eos);
        let tokens = beam_search(&params, source.ids(), &beam)?;
        let text = decode(tokens.ids(), &table)?;
        summaries.push(if cfg.normalize { normalize_whitespace(&text) } else { text });
    }
    let mut text = summaries.join("\n");
    text.push('\n');
    write_text(output, &text)?;
    log::info!("{} summaries written to {}", summaries.len(), output.display());
    Ok(())
}

pub fn score(cfg: &RunConfig) -> Result<()> {
    let candidates = read_lines(cfg.require(&cfg.paths.candidates, "candidates")?)?;
    let references = read_lines(cfg.require(&cfg.paths.references, "references")?)?;
    if candidates.len() != references.len() {
        bail!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        );
    }
    let report = score_corpus(&candidates, &references);
    let json = serde_json::to_string_pretty(&report)?;
    match &cfg.paths.output {
        Some(path) => write_text(path, &format!("{json}\n"))?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, step: f64, tol: f64) -> Result<ExitCode> {
    let seed = cfg.model.seed;
    let model = ModelConfig { seed, ..check_config() };
    let params = init_params(&model)?;
    let example = synthetic_example(
        model.vocab_size,
        model.max_source_len,
        model.max_summary_len,
        seed,
    );
    let reports = check_loss_terms(&params, &example, cfg.train.alphas, step, tol)?;
    let mut pass = true;
    let mut terms = serde_json::Map::new();
    for (term, report) in &reports {
        pass &= report.pass;
        let params: serde_json::Map<_, _> = report
            .params
            .iter()
            .map(|(name, e)| {
                (
                    name.clone(),
                    json!({ "max_rel_err": e.max_rel_err, "max_abs_err": e.max_abs_err }),
                )
            })
            .collect();
        terms.insert(
            term.to_string(),
            json!({ "pass": report.pass, "max_rel_err": report.max_rel_err(), "params": params }),
        );
    }
    let out = json!({ "seed": seed, "step": step, "tolerance": tol, "pass": pass, "terms": terms });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if pass {
        Ok(ExitCode::SUCCESS)
    } else {
        log::error!("gradient check failed");
        Ok(ExitCode::from(2))
    }
}
