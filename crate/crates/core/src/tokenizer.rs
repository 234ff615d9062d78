//! Word-level byte-pair tokenizer.
//!
//! Non-initial words carry a leading space marker that is folded into the
//! word before merging, so `"Mark Webber"` is split as the forms `Mark` and
//! `ĠWebber`. Every word is encoded independently, which is what makes the
//! word→token range map exact.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::write_atomic;

/// Stands in for the space preceding a non-initial word.
pub const SPACE_MARKER: char = 'Ġ';

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const TABLE_FORMAT_VERSION: u32 = 1;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train merges on an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} is outside the vocabulary of {vocab} entries")]
    IdOutOfRange { id: TokenId, vocab: usize },
    #[error("invalid merge table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
}

impl Specials {
    pub const DEFAULT: Specials = Specials {
        pad: 0,
        bos: 1,
        eos: 2,
        unk: 3,
    };

    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.unk
    }
}

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Token range of each input word, in word order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordTokenMap {
    pub ranges: Vec<Range<usize>>,
}

impl WordTokenMap {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Ordered merge rules plus the vocabulary they induce.
///
/// Ids: specials first (`<pad>`, `<s>`, `</s>`, `<unk>`), then the base
/// alphabet in character order, then each new merged symbol in rule order.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTable {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    symbols: Vec<String>,
    vocab: HashMap<String, TokenId>,
    ranks: HashMap<(String, String), usize>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    format_version: u32,
    alphabet: Vec<String>,
    merges: Vec<[String; 2]>,
    specials: BTreeMap<String, TokenId>,
}

impl MergeTable {
    fn build(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let mut symbols: Vec<String> = [PAD, BOS, EOS, UNK].map(String::from).to_vec();
        let mut vocab: HashMap<String, TokenId> = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            vocab.insert(s.clone(), i as TokenId);
        }
        fn push(s: String, symbols: &mut Vec<String>, vocab: &mut HashMap<String, TokenId>) {
            if !vocab.contains_key(&s) {
                vocab.insert(s.clone(), symbols.len() as TokenId);
                symbols.push(s);
            }
        }
        for c in &alphabet {
            push(c.to_string(), &mut symbols, &mut vocab);
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            if !vocab.contains_key(l) || !vocab.contains_key(r) {
                return Err(TokenizerError::InvalidTable(format!(
                    "merge {rank} ({l:?}, {r:?}) uses an unknown symbol"
                )));
            }
            if ranks.insert((l.clone(), r.clone()), rank).is_some() {
                return Err(TokenizerError::InvalidTable(format!(
                    "duplicate merge ({l:?}, {r:?})"
                )));
            }
            push(format!("{l}{r}"), &mut symbols, &mut vocab);
        }
        Ok(Self {
            alphabet,
            merges,
            symbols,
            vocab,
            ranks,
            specials: Specials::DEFAULT,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            format_version: TABLE_FORMAT_VERSION,
            alphabet: self.alphabet.iter().map(char::to_string).collect(),
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            specials: [
                ("pad", self.specials.pad),
                ("bos", self.specials.bos),
                ("eos", self.specials.eos),
                ("unk", self.specials.unk),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: TableFile = serde_json::from_str(text)?;
        if file.format_version != TABLE_FORMAT_VERSION {
            return Err(TokenizerError::InvalidTable(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let alphabet = file
            .alphabet
            .iter()
            .map(|s| {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(TokenizerError::InvalidTable(format!(
                        "alphabet entry {s:?} is not one character"
                    ))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let merges = file.merges.into_iter().map(|[l, r]| (l, r)).collect();
        let table = Self::build(alphabet, merges)?;
        let expected = [
            ("pad", table.specials.pad),
            ("bos", table.specials.bos),
            ("eos", table.specials.eos),
            ("unk", table.specials.unk),
        ];
        for (name, id) in expected {
            if file.specials.get(name) != Some(&id) {
                return Err(TokenizerError::InvalidTable(format!(
                    "special `{name}` must have id {id}"
                )));
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        write_atomic(path, |w| w.write_all(self.to_json().as_bytes()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn encode_form(&self, form: &str) -> Vec<TokenId> {
        let mut symbols: Vec<String> = form.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            symbols = merge_pair(&symbols, l, r);
        }
        symbols
            .iter()
            .map(|s| self.vocab.get(s).copied().unwrap_or(self.specials.unk))
            .collect()
    }
}

fn word_form(word: &str, initial: bool) -> String {
    if initial {
        word.to_string()
    } else {
        format!("{SPACE_MARKER}{word}")
    }
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns `merge_count` rules by repeatedly merging the most frequent
/// adjacent pair; ties go to the lexicographically smallest `(left, right)`.
///
/// Stops early if no pair is left to merge.
pub fn train_merges<S: AsRef<str>>(
    corpus: &[Vec<S>],
    merge_count: usize,
) -> Result<MergeTable, TokenizerError> {
    let mut forms: BTreeMap<String, u64> = BTreeMap::new();
    for seq in corpus {
        for (i, w) in seq.iter().enumerate() {
            *forms.entry(word_form(w.as_ref(), i == 0)).or_default() += 1;
        }
    }
    if forms.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let alphabet: Vec<char> = forms
        .keys()
        .flat_map(|f| f.chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut words: Vec<(Vec<String>, u64)> = forms
        .into_iter()
        .map(|(f, n)| (f.chars().map(String::from).collect(), n))
        .collect();

    let mut merges = Vec::with_capacity(merge_count);
    for _ in 0..merge_count {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((&w[0], &w[1])).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in ascending order, so keeping the first
        // maximum resolves ties lexicographically.
        let mut best: Option<((&str, &str), u64)> = None;
        for (pair, n) in counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((pair, n));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &l, &r);
        }
        merges.push((l, r));
    }
    MergeTable::build(alphabet, merges)
}

/// Encodes each word independently and records its token range.
///
/// Characters outside the table's alphabet become `<unk>`; an empty word
/// encodes as a single `<unk>` so every range is non-empty.
pub fn encode_words<S: AsRef<str>>(words: &[S], table: &MergeTable) -> (TokenSeq, WordTokenMap) {
    let mut ids = Vec::new();
    let mut ranges = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let start = ids.len();
        let w = w.as_ref();
        if w.is_empty() {
            ids.push(table.specials.unk);
        } else {
            ids.extend(table.encode_form(&word_form(w, i == 0)));
        }
        ranges.push(start..ids.len());
    }
    (TokenSeq(ids), WordTokenMap { ranges })
}

/// Joins token symbols back into text.
///
/// `<pad>`, `<s>`, `</s>` are dropped, markers become single spaces, and a
/// leading space (from a sequence that starts mid-text) is removed.
pub fn decode(ids: &[TokenId], table: &MergeTable) -> Result<String, TokenizerError> {
    let sp = table.specials;
    let mut text = String::new();
    for &id in ids {
        let symbol = table.symbol(id).ok_or(TokenizerError::IdOutOfRange {
            id,
            vocab: table.vocab_size(),
        })?;
        if id == sp.pad || id == sp.bos || id == sp.eos {
            continue;
        }
        text.extend(symbol.chars().map(|c| if c == SPACE_MARKER { ' ' } else { c }));
    }
    match text.strip_prefix(' ') {
        Some(rest) => Ok(rest.to_string()),
        None => Ok(text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(matches!(train_merges(&empty, 3), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn zero_merges_is_character_level() {
        let t = train_merges(&corpus(&["ab ba"]), 0).unwrap();
        assert!(t.merges().is_empty());
        // 4 specials + {a, b, Ġ}
        assert_eq!(t.vocab_size(), 7);
        let (ids, map) = encode_words(&["ab", "ba"], &t);
        assert_eq!(ids.len(), 5);
        assert_eq!(map.ranges, vec![0..2, 2..5]);
    }

    #[test]
    fn single_pair_corpus_learns_one_rule() {
        let t = train_merges(&corpus(&["aa aa aa"]), 1).unwrap();
        assert_eq!(t.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b) and (c,d) both occur once.
        let t = train_merges(&corpus(&["cd", "ab"]), 1).unwrap();
        assert_eq!(t.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn decode_roundtrip_and_empty() {
        let t = train_merges(&corpus(&["a b a b"]), 2).unwrap();
        let (ids, _) = encode_words(&["a", "b"], &t);
        assert_eq!(decode(ids.ids(), &t).unwrap(), "a b");
        assert_eq!(decode(&[], &t).unwrap(), "");
        let with_specials = [t.specials().bos, ids.0[0], ids.0[1], t.specials().eos, 0];
        assert_eq!(decode(&with_specials, &t).unwrap(), "a b");
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let t = train_merges(&corpus(&["a"]), 0).unwrap();
        assert!(matches!(
            decode(&[99], &t),
            Err(TokenizerError::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let t = train_merges(&corpus(&["ab"]), 1).unwrap();
        let (ids, map) = encode_words(&["az"], &t);
        assert_eq!(ids.0, vec![t.vocab["a"], t.specials().unk]);
        assert_eq!(map.ranges, vec![0..2]);
    }

    #[test]
    fn json_roundtrip_preserves_table() {
        let t = train_merges(&corpus(&["the cat sat on the mat", "the hat"]), 6).unwrap();
        let back = MergeTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert!(json["merges"].is_array());
        assert_eq!(json["specials"]["eos"], 2);
    }

    #[test]
    fn corrupt_table_is_rejected() {
        let bad = r#"{"format_version":1,"alphabet":["a"],"merges":[["a","b"]],"specials":{"pad":0,"bos":1,"eos":2,"unk":3}}"#;
        assert!(matches!(
            MergeTable::from_json(bad),
            Err(TokenizerError::InvalidTable(_))
        ));
    }
}
