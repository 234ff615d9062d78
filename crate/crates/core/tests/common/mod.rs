#![allow(dead_code)]

use std::path::PathBuf;

use infosum::corpus::{
    build_example, filter_entities, load_annotated, AnnotatedDocument, EntityFilter, Limits,
    TrainingExample,
};
use infosum::model::ModelConfig;
use infosum::tokenizer::{train_merges, MergeTable};
use infosum::trainer::TrainConfig;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

pub const OVERFIT_LIMITS: Limits = Limits {
    source: 32,
    summary: 16,
};
pub const OVERFIT_MERGES: usize = 200;
pub const OVERFIT_EPOCHS: usize = 300;

pub struct Corpus {
    pub docs: Vec<AnnotatedDocument>,
    pub table: MergeTable,
    pub examples: Vec<TrainingExample>,
}

/// The 16-document overfit corpus, filtered and tokenized with merges
/// learned on its own words.
pub fn overfit_corpus() -> Corpus {
    let report = load_annotated(&fixture("overfit.jsonl")).unwrap();
    assert!(report.rejected.is_empty());
    let docs: Vec<_> = report
        .documents
        .iter()
        .map(|d| filter_entities(d, &EntityFilter::default()))
        .collect();
    let words: Vec<Vec<String>> = docs
        .iter()
        .flat_map(|d| [d.doc_words.clone(), d.summary_words.clone()])
        .collect();
    let table = train_merges(&words, OVERFIT_MERGES).unwrap();
    let examples = docs
        .iter()
        .map(|d| build_example(d, &table, OVERFIT_LIMITS).unwrap())
        .collect();
    Corpus {
        docs,
        table,
        examples,
    }
}

pub fn overfit_model(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 32,
        layers: 2,
        heads: 4,
        ffn_dim: 64,
        dropout: 0.1,
        max_source_len: OVERFIT_LIMITS.source,
        max_summary_len: OVERFIT_LIMITS.summary,
        seed,
        init_std: 0.02,
    }
}

pub fn overfit_training(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        epochs: OVERFIT_EPOCHS,
        batch_size: 1,
        seed,
        ..TrainConfig::default()
    }
}
