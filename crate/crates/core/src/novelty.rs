//! Lexical and syntactic novelty of a test set against training data:
//! unique test n-gram types (over words and over POS tags) never seen in
//! training, plus the mean compositional degree of the test side.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compdegree::min_cover;
use crate::ngram_index::NGramDictionary;

pub const REPORT_ORDERS: [usize; 2] = [2, 3];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NoveltyError {
    #[error("sentence {index}: {tokens} tokens but {tags} tags")]
    TagMismatch { index: usize, tokens: usize, tags: usize },
    #[error("{stream}: {tagged} tagged sentences for {plain} token sentences")]
    StreamLengthMismatch { stream: &'static str, tagged: usize, plain: usize },
    #[error("{stream} sentence {index}: tagged tokens differ from the token stream")]
    Misaligned { stream: &'static str, index: usize },
    #[error("test sentence {index} is empty")]
    EmptySentence { index: usize },
    #[error("line {line}: expected token<TAB>TAG")]
    Malformed { line: usize },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self, NoveltyError> {
        if tokens.len() != tags.len() {
            return Err(NoveltyError::TagMismatch {
                index: 0,
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        Ok(TaggedSentence { tokens, tags })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

/// Vertical format: one `token<TAB>TAG` per line, blank line between
/// sentences.
pub fn read_tagged<R: BufRead>(reader: R) -> Result<Vec<TaggedSentence>, NoveltyError> {
    let mut out = Vec::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::new());
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| NoveltyError::Io(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push(TaggedSentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        let (tok, tag) = line.split_once('\t').ok_or(NoveltyError::Malformed { line: idx + 1 })?;
        if tok.is_empty() || tag.is_empty() || tag.contains('\t') {
            return Err(NoveltyError::Malformed { line: idx + 1 });
        }
        tokens.push(tok.to_string());
        tags.push(tag.to_string());
    }
    if !tokens.is_empty() {
        out.push(TaggedSentence { tokens, tags });
    }
    Ok(out)
}

fn ngram_types<T: Eq + Hash>(stream: &[impl AsRef<[T]>], n: usize) -> HashSet<&[T]> {
    stream
        .iter()
        .flat_map(|s| s.as_ref().windows(n))
        .collect()
}

/// Number of distinct test n-grams absent from training. Windows never span
/// two sentences.
pub fn novel_ngram_count<T: Eq + Hash>(
    train_stream: &[impl AsRef<[T]>],
    test_stream: &[impl AsRef<[T]>],
    n: usize,
) -> usize {
    assert!(n >= 1, "n-gram order must be at least 1");
    let train = ngram_types(train_stream, n);
    ngram_types(test_stream, n)
        .into_iter()
        .filter(|g| !train.contains(g))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub n_examples: usize,
    pub mean_degree: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagset: Option<String>,
    pub novel_word_ngrams: BTreeMap<usize, usize>,
    pub novel_tag_ngrams: BTreeMap<usize, usize>,
}

fn check_aligned(
    stream: &'static str,
    plain: &[Vec<String>],
    tagged: &[TaggedSentence],
) -> Result<(), NoveltyError> {
    if plain.len() != tagged.len() {
        return Err(NoveltyError::StreamLengthMismatch {
            stream,
            tagged: tagged.len(),
            plain: plain.len(),
        });
    }
    for (index, (p, t)) in plain.iter().zip(tagged).enumerate() {
        if t.tokens.len() != t.tags.len() {
            return Err(NoveltyError::TagMismatch {
                index,
                tokens: t.tokens.len(),
                tags: t.tags.len(),
            });
        }
        if p != &t.tokens {
            return Err(NoveltyError::Misaligned { stream, index });
        }
    }
    Ok(())
}

/// Word and tag novelty for n = 2 and 3, plus mean degree of the test side.
pub fn benchmark_report(
    train: &[Vec<String>],
    test: &[Vec<String>],
    tagged_train: &[TaggedSentence],
    tagged_test: &[TaggedSentence],
    dict: &NGramDictionary,
    tagset: Option<&str>,
) -> Result<NoveltyReport, NoveltyError> {
    check_aligned("train", train, tagged_train)?;
    check_aligned("test", test, tagged_test)?;

    let mut degree_sum = 0.0;
    for (index, sent) in test.iter().enumerate() {
        let cover = min_cover(sent, dict).map_err(|_| NoveltyError::EmptySentence { index })?;
        degree_sum += cover.atom_count() as f64 / sent.len() as f64;
    }
    let mean_degree = if test.is_empty() { 0.0 } else { degree_sum / test.len() as f64 };

    let train_tags: Vec<&[String]> = tagged_train.iter().map(|t| t.tags()).collect();
    let test_tags: Vec<&[String]> = tagged_test.iter().map(|t| t.tags()).collect();
    let mut novel_word_ngrams = BTreeMap::new();
    let mut novel_tag_ngrams = BTreeMap::new();
    for n in REPORT_ORDERS {
        novel_word_ngrams.insert(n, novel_ngram_count(train, test, n));
        novel_tag_ngrams.insert(n, novel_ngram_count(&train_tags, &test_tags, n));
    }
    Ok(NoveltyReport {
        n_examples: test.len(),
        mean_degree,
        tagset: tagset.map(str::to_owned),
        novel_word_ngrams,
        novel_tag_ngrams,
    })
}
