//! ROUGE-1/2/Lsum scoring and whitespace clean-up of generated summaries.
//!
//! Tokens are produced by lowercasing, splitting on whitespace, and
//! trimming non-alphanumeric characters from both ends of each piece
//! (pieces that become empty are dropped). No stemming.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(hits: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return Self::default();
        }
        let precision = hits as f64 / candidate_total as f64;
        let recall = hits as f64 / reference_total as f64;
        Self::from_pr(precision, recall)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap. `n = 0` and empty inputs score zero.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refs, n);
    let hits = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(
        hits,
        cand_counts.values().sum(),
        ref_counts.values().sum(),
    )
}

/// Splits on newlines and on `.`, `!`, `?` that end a whitespace-delimited piece.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    for line in text.lines() {
        let mut current: Vec<&str> = Vec::new();
        for piece in line.split_whitespace() {
            current.push(piece);
            if piece.ends_with(['.', '!', '?']) {
                sentences.push(current.join(" "));
                current.clear();
            }
        }
        if !current.is_empty() {
            sentences.push(current.join(" "));
        }
    }
    sentences
}

/// Indices into `a` of one longest common subsequence of `a` and `b`.
fn lcs_indices(a: &[String], b: &[String]) -> Vec<usize> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let mut picked = Vec::with_capacity(table[n][m]);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            picked.push(i - 1);
            i -= 1;
            j -= 1;
        } else if table[i - 1][j] >= table[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    picked.reverse();
    picked
}

/// Summary-level LCS ROUGE.
///
/// For each reference sentence, the union of its LCS matches against every
/// candidate sentence counts as hits, clipped by the remaining token counts
/// on both sides.
pub fn rouge_lsum(candidate: &str, reference: &str) -> RougeScore {
    let cand_sents: Vec<Vec<String>> = split_sentences(candidate)
        .iter()
        .map(|s| tokenize(s))
        .filter(|s| !s.is_empty())
        .collect();
    let ref_sents: Vec<Vec<String>> = split_sentences(reference)
        .iter()
        .map(|s| tokenize(s))
        .filter(|s| !s.is_empty())
        .collect();
    let cand_total: usize = cand_sents.iter().map(Vec::len).sum();
    let ref_total: usize = ref_sents.iter().map(Vec::len).sum();
    if cand_total == 0 || ref_total == 0 {
        return RougeScore::default();
    }

    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    for t in cand_sents.iter().flatten() {
        *cand_left.entry(t).or_insert(0) += 1;
    }
    let mut ref_left: HashMap<&str, usize> = HashMap::new();
    for t in ref_sents.iter().flatten() {
        *ref_left.entry(t).or_insert(0) += 1;
    }

    let mut hits = 0;
    for r in &ref_sents {
        let mut union: Vec<usize> = cand_sents
            .iter()
            .flat_map(|c| lcs_indices(r, c))
            .collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let tok = r[i].as_str();
            let (Some(cl), Some(rl)) = (cand_left.get_mut(tok), ref_left.get_mut(tok)) else {
                continue;
            };
            if *cl > 0 && *rl > 0 {
                *cl -= 1;
                *rl -= 1;
                hits += 1;
            }
        }
    }
    RougeScore::from_counts(hits, cand_total, ref_total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_lsum: RougeScore,
}

impl RougeTriple {
    pub fn score(candidate: &str, reference: &str) -> Self {
        Self {
            rouge1: rouge_n(candidate, reference, 1),
            rouge2: rouge_n(candidate, reference, 2),
            rouge_lsum: rouge_lsum(candidate, reference),
        }
    }

    /// Mean of the three F-scores.
    pub fn mean_f1(&self) -> f64 {
        (self.rouge1.f1 + self.rouge2.f1 + self.rouge_lsum.f1) / 3.0
    }
}

/// Per-example and corpus-mean scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub examples: Vec<RougeTriple>,
    pub mean: RougeTriple,
}

fn mean_score(scores: impl Iterator<Item = RougeScore> + Clone, n: f64) -> RougeScore {
    RougeScore {
        precision: scores.clone().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.clone().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Scores aligned candidate/reference pairs in order.
pub fn score_corpus<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> ScoreReport {
    let examples: Vec<RougeTriple> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| RougeTriple::score(c.as_ref(), r.as_ref()))
        .collect();
    if examples.is_empty() {
        return ScoreReport::default();
    }
    let n = examples.len() as f64;
    let mean = RougeTriple {
        rouge1: mean_score(examples.iter().map(|e| e.rouge1), n),
        rouge2: mean_score(examples.iter().map(|e| e.rouge2), n),
        rouge_lsum: mean_score(examples.iter().map(|e| e.rouge_lsum), n),
    };
    ScoreReport { examples, mean }
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// One pass of the whitespace rules; returns `None` when nothing changed.
fn normalize_pass(chars: &[char]) -> Option<Vec<char>> {
    let n = chars.len();
    let mut drop = vec![false; n];
    let mut insert_after = vec![false; n];

    for i in 0..n {
        if chars[i] != ' ' {
            continue;
        }
        let prev = i.checked_sub(1).map(|p| chars[p]);
        let next = chars.get(i + 1).copied();
        // "( x" and "x )"
        if prev == Some('(') && next.is_some_and(|c| c != ' ') {
            drop[i] = true;
        }
        if next == Some(')') && prev.is_some_and(|c| c != ' ') {
            drop[i] = true;
        }
    }

    // "a - b", "a -b", "a- b" between alphanumerics
    for h in 0..n {
        if chars[h] != '-' {
            continue;
        }
        let left_space = h >= 1 && chars[h - 1] == ' ';
        let right_space = h + 1 < n && chars[h + 1] == ' ';
        let left = if left_space { h.checked_sub(2) } else { h.checked_sub(1) };
        let right = if right_space { h + 2 } else { h + 1 };
        let joins = left.is_some_and(|l| chars[l].is_alphanumeric())
            && chars.get(right).is_some_and(|c| c.is_alphanumeric());
        if joins {
            if left_space {
                drop[h - 1] = true;
            }
            if right_space {
                drop[h + 1] = true;
            }
        }
    }

    // "x'sy" -> "x's y"
    for i in 1..n.saturating_sub(2) {
        if is_apostrophe(chars[i])
            && chars[i - 1].is_alphanumeric()
            && chars[i + 1] == 's'
            && chars[i + 2].is_alphabetic()
        {
            insert_after[i + 1] = true;
        }
    }

    if !drop.iter().any(|&d| d) && !insert_after.iter().any(|&d| d) {
        return None;
    }
    let mut out = Vec::with_capacity(n + 4);
    for i in 0..n {
        if !drop[i] {
            out.push(chars[i]);
        }
        if insert_after[i] {
            out.push(' ');
        }
    }
    Some(out)
}

/// Removes single spaces just inside round brackets and around hyphens that
/// join alphanumerics, and inserts a space after an `'s` clitic glued to the
/// next word. Applied to a fixpoint, so the result is idempotent.
pub fn normalize_whitespace(text: &str) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    while let Some(next) = normalize_pass(&chars) {
        chars = next;
    }
    chars.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_score_one() {
        let s = rouge_n("the cat sat", "the cat sat", 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_lsum("A cat sat.", "a cat sat.").f1, 1.0);
    }

    #[test]
    fn unigram_and_bigram_fixture() {
        let s = rouge_n("the cat", "the cat sat", 1);
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        let s = rouge_n("the cat", "the cat sat", 2);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let s = rouge_n("the the the", "the cat", 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn empty_inputs_score_zero() {
        assert_eq!(rouge_n("", "a b", 1), RougeScore::default());
        assert_eq!(rouge_n("a b", "", 2), RougeScore::default());
        assert_eq!(rouge_n("a", "a", 2), RougeScore::default());
        assert_eq!(rouge_lsum("", "a b c"), RougeScore::default());
    }

    #[test]
    fn lcs_fixture() {
        let s = rouge_lsum("a b c", "a x c");
        for v in [s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_level_union_over_candidate_sentences() {
        // Reference sentence matches pieces spread over two candidate sentences.
        let s = rouge_lsum("a b. c d.", "a b c d.");
        assert_eq!(s.f1, 1.0);
        // Clipping: reference tokens cannot be matched twice.
        let s = rouge_lsum("a a.", "a.");
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            split_sentences("One two. Three!\nfour five"),
            vec!["One two.", "Three!", "four five"]
        );
    }

    #[test]
    fn tokenizer_strips_edges_and_lowercases() {
        assert_eq!(tokenize("  \"Hello,\" (World)! --  "), vec!["hello", "world"]);
        assert_eq!(tokenize("state-of-the-art"), vec!["state-of-the-art"]);
    }

    #[test]
    fn whitespace_rules() {
        assert_eq!(normalize_whitespace("over ( two ) parts"), "over (two) parts");
        assert_eq!(normalize_whitespace("state - of - the - art"), "state-of-the-art");
        assert_eq!(normalize_whitespace("Webber'steam"), "Webber's team");
        assert_eq!(normalize_whitespace("a 1 - 2 win"), "a 1-2 win");
        assert_eq!(normalize_whitespace("Webber's team"), "Webber's team");
        assert_eq!(normalize_whitespace("well -"), "well -");
        assert_eq!(normalize_whitespace("it's"), "it's");
        assert_eq!(normalize_whitespace("x  - y"), "x  - y");
    }

    #[test]
    fn corpus_report_means() {
        let r = score_corpus(&["the cat", "a b c"], &["the cat sat", "a x c"]);
        assert_eq!(r.examples.len(), 2);
        assert!((r.mean.rouge1.f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
