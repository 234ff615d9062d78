//! Annotated-document ingestion and token-aligned training examples.
//!
//! Input is JSONL, one record per line:
//!
//! ```json
//! {"doc_words": ["Mark", "Webber", "won"], "summary_words": ["Webber", "won"],
//!  "doc_entities": [{"label": "PERSON", "start": 0, "end": 2}],
//!  "summary_entities": [{"label": "PERSON", "start": 0, "end": 1}]}
//! ```
//!
//! Entity `start`/`end` are word indices, `end` exclusive.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{encode_words, MergeTable, TokenSeq, WordTokenMap};

/// Entity types kept by the default filter.
pub const DEFAULT_ENTITY_TYPES: [&str; 20] = [
    "TITLE",
    "PERSON",
    "ORGANIZATION",
    "NATIONALITY",
    "RELIGION",
    "IDEOLOGY",
    "DEGREE",
    "DATE",
    "TIME",
    "DURATION",
    "LOCATION",
    "CITY",
    "STATE_OR_PROVINCE",
    "COUNTRY",
    "NUMBER",
    "MONEY",
    "PERCENT",
    "ORDINAL",
    "CAUSE_OF_DEATH",
    "CRIMINAL_CHARGE",
];

/// Longest entity, in words, kept by the default filter.
pub const DEFAULT_MAX_ENTITY_WORDS: usize = 10;

pub const EXAMPLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{side} is empty after truncation")]
    EmptySequence { side: Side },
    #[error("length limits must be at least 2, got source {source_limit} / summary {summary_limit}")]
    BadLimits {
        source_limit: usize,
        summary_limit: usize,
    },
    #[error("line {line}: {reason}")]
    BadExampleLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub label: String,
    #[serde(rename = "start")]
    pub word_start: usize,
    #[serde(rename = "end")]
    pub word_end: usize,
}

impl EntitySpan {
    pub fn new(label: impl Into<String>, word_start: usize, word_end: usize) -> Self {
        Self {
            label: label.into(),
            word_start,
            word_end,
        }
    }

    pub fn word_len(&self) -> usize {
        self.word_end.saturating_sub(self.word_start)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_words: Vec<String>,
    pub summary_words: Vec<String>,
    #[serde(default)]
    pub doc_entities: Vec<EntitySpan>,
    #[serde(default)]
    pub summary_entities: Vec<EntitySpan>,
}

impl AnnotatedDocument {
    /// Checks span bounds and overlap on both sides.
    pub fn validate(&self) -> Result<(), String> {
        check_spans("doc", &self.doc_entities, self.doc_words.len())?;
        check_spans("summary", &self.summary_entities, self.summary_words.len())?;
        if let Some(i) = self.doc_words.iter().chain(&self.summary_words).position(String::is_empty) {
            return Err(format!("word {i} is empty"));
        }
        Ok(())
    }
}

fn check_spans(side: &str, spans: &[EntitySpan], words: usize) -> Result<(), String> {
    for (i, s) in spans.iter().enumerate() {
        if s.word_end <= s.word_start {
            return Err(format!(
                "{side} entity {i} ({}) has empty range {}..{}",
                s.label, s.word_start, s.word_end
            ));
        }
        if s.word_end > words {
            return Err(format!(
                "{side} entity {i} ({}) ends at word {} but there are {words} words",
                s.label, s.word_end
            ));
        }
    }
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.word_start, s.word_end));
    for pair in sorted.windows(2) {
        if pair[1].word_start < pair[0].word_end {
            return Err(format!(
                "{side} entities {}..{} and {}..{} overlap",
                pair[0].word_start, pair[0].word_end, pair[1].word_start, pair[1].word_end
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub documents: Vec<AnnotatedDocument>,
    pub rejected: Vec<Rejection>,
}

/// Parses JSONL records; blank lines are skipped, bad records are reported
/// rather than aborting the load.
pub fn parse_annotated(reader: impl BufRead) -> Result<LoadReport, CorpusError> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<AnnotatedDocument>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|doc| doc.validate().map(|()| doc));
        match parsed {
            Ok(doc) => report.documents.push(doc),
            Err(reason) => {
                log::warn!("line {}: rejected: {reason}", i + 1);
                report.rejected.push(Rejection { line: i + 1, reason });
            }
        }
    }
    Ok(report)
}

pub fn load_annotated(path: &Path) -> Result<LoadReport, CorpusError> {
    parse_annotated(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityFilter {
    pub allowed: BTreeSet<String>,
    pub max_words: usize,
}

impl Default for EntityFilter {
    fn default() -> Self {
        Self {
            allowed: DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect(),
            max_words: DEFAULT_MAX_ENTITY_WORDS,
        }
    }
}

impl EntityFilter {
    pub fn keeps(&self, span: &EntitySpan) -> bool {
        self.allowed.contains(&span.label) && span.word_len() <= self.max_words
    }
}

/// Drops entities with a disallowed label or more than `max_words` words.
pub fn filter_entities(doc: &AnnotatedDocument, filter: &EntityFilter) -> AnnotatedDocument {
    let keep = |spans: &[EntitySpan]| -> Vec<EntitySpan> {
        spans.iter().filter(|s| filter.keeps(s)).cloned().collect()
    };
    AnnotatedDocument {
        doc_words: doc.doc_words.clone(),
        summary_words: doc.summary_words.clone(),
        doc_entities: keep(&doc.doc_entities),
        summary_entities: keep(&doc.summary_entities),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Summary,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Summary => "summary",
        })
    }
}

/// Entity position in token space, `token_end` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntitySpan {
    #[serde(rename = "start")]
    pub token_start: usize,
    #[serde(rename = "end")]
    pub token_end: usize,
    pub side: Side,
}

impl TokenEntitySpan {
    /// Number of tokens in the span.
    pub fn n(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.token_start..self.token_end
    }
}

/// Composes word spans with the word→token map; spans not entirely within
/// the first `window` tokens are dropped whole.
pub fn map_entity_spans(
    entities: &[EntitySpan],
    map: &WordTokenMap,
    window: usize,
    side: Side,
) -> Vec<TokenEntitySpan> {
    let mut spans: Vec<TokenEntitySpan> = entities
        .iter()
        .filter(|e| e.word_end > e.word_start && e.word_end <= map.len())
        .map(|e| TokenEntitySpan {
            token_start: map.ranges[e.word_start].start,
            token_end: map.ranges[e.word_end - 1].end,
            side,
        })
        .filter(|s| s.token_end <= window && s.n() >= 1)
        .collect();
    spans.sort_by_key(|s| s.token_start);
    spans
}

/// Maximum token lengths, each including the trailing `</s>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub source: usize,
    pub summary: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            source: 64,
            summary: 32,
        }
    }
}

/// One teacher-forced training pair.
///
/// `source` and `summary` end with `</s>`; `teacher_inputs` is
/// `[<s>] + summary[..m-1]`, so position `t` of the decoder predicts
/// `summary[t]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub source: TokenSeq,
    pub summary: TokenSeq,
    pub teacher_inputs: TokenSeq,
    pub source_entities: Vec<TokenEntitySpan>,
    pub summary_entities: Vec<TokenEntitySpan>,
}

impl TrainingExample {
    pub fn entities(&self) -> impl Iterator<Item = &TokenEntitySpan> {
        self.source_entities.iter().chain(&self.summary_entities)
    }
}

/// Keeps at most `limit - 1` ids and appends `</s>`.
pub fn truncate_with_eos(ids: &TokenSeq, limit: usize, eos: u32) -> TokenSeq {
    let mut out: Vec<u32> = ids.ids()[..ids.len().min(limit - 1)].to_vec();
    out.push(eos);
    TokenSeq(out)
}

/// Encodes, truncates, and aligns one (already filtered) document.
pub fn build_example(
    doc: &AnnotatedDocument,
    table: &MergeTable,
    limits: Limits,
) -> Result<TrainingExample, CorpusError> {
    if limits.source < 2 || limits.summary < 2 {
        return Err(CorpusError::BadLimits {
            source_limit: limits.source,
            summary_limit: limits.summary,
        });
    }
    let sp = table.specials();
    let (src_ids, src_map) = encode_words(&doc.doc_words, table);
    let (sum_ids, sum_map) = encode_words(&doc.summary_words, table);
    if src_ids.is_empty() {
        return Err(CorpusError::EmptySequence { side: Side::Source });
    }
    if sum_ids.is_empty() {
        return Err(CorpusError::EmptySequence {
            side: Side::Summary,
        });
    }
    let source = truncate_with_eos(&src_ids, limits.source, sp.eos);
    let summary = truncate_with_eos(&sum_ids, limits.summary, sp.eos);
    let mut teacher = Vec::with_capacity(summary.len());
    teacher.push(sp.bos);
    teacher.extend_from_slice(&summary.ids()[..summary.len() - 1]);

    Ok(TrainingExample {
        source_entities: map_entity_spans(
            &doc.doc_entities,
            &src_map,
            source.len() - 1,
            Side::Source,
        ),
        summary_entities: map_entity_spans(
            &doc.summary_entities,
            &sum_map,
            summary.len() - 1,
            Side::Summary,
        ),
        source,
        summary,
        teacher_inputs: TokenSeq(teacher),
    })
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    format_version: u32,
    #[serde(flatten)]
    example: TrainingExample,
}

pub fn write_examples(writer: impl Write, examples: &[TrainingExample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(writer);
    for ex in examples {
        let record = ExampleRecord {
            format_version: EXAMPLE_FORMAT_VERSION,
            example: ex.clone(),
        };
        serde_json::to_writer(&mut w, &record).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(reader: impl BufRead) -> Result<Vec<TrainingExample>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CorpusError::BadExampleLine { line: i + 1, reason };
        let record: ExampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if record.format_version != EXAMPLE_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                record.format_version
            )));
        }
        out.push(record.example);
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainingExample>, CorpusError> {
    read_examples(BufReader::new(File::open(path)?))
}
