//! Parallel corpus ingestion, per-side vocabulary counts and OOV screening.
//!
//! Input is pre-tokenized: tokens are whitespace-delimited and no case
//! folding or subword segmentation is applied.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("unknown corpus format {0:?} (expected tsv or jsonl)")]
    UnknownFormat(String),
    #[error("unknown side {0:?} (expected source or target)")]
    UnknownSide(String),
}

/// Which half of a parallel pair an operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    #[default]
    Target,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Target => "target",
        })
    }
}

impl FromStr for Side {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" | "src" => Ok(Side::Source),
            "target" | "tgt" => Ok(Side::Target),
            other => Err(CorpusError::UnknownSide(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl CorpusFormat {
    /// Guess from a file extension; anything other than `.jsonl`/`.json` is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(CorpusFormat::Tsv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ParallelExample {
    pub fn new(id: impl Into<String>, source: &str, target: &str) -> Self {
        ParallelExample {
            id: id.into(),
            source: tokenize(source),
            target: tokenize(target),
            meta: BTreeMap::new(),
        }
    }

    pub fn tokens(&self, side: Side) -> &[String] {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// On-disk JSONL shape: sides are space-joined strings.
#[derive(Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    source: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, serde_json::Value>>,
}

pub fn load_parallel_corpus(
    path: &Path,
    format: CorpusFormat,
) -> Result<Vec<ParallelExample>, CorpusError> {
    let file = File::open(path)?;
    read_parallel_corpus(BufReader::new(file), format)
}

/// Parse a corpus from any reader. Blank lines are skipped; ids default to
/// the zero-based record index.
pub fn read_parallel_corpus<R: BufRead>(
    reader: R,
    format: CorpusFormat,
) -> Result<Vec<ParallelExample>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let record_index = out.len();
        let example = match format {
            CorpusFormat::Tsv => parse_tsv_line(trimmed, line_no, record_index)?,
            CorpusFormat::Jsonl => parse_json_line(trimmed, line_no, record_index)?,
        };
        if !seen.insert(example.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: example.id,
            });
        }
        out.push(example);
    }
    Ok(out)
}

fn parse_tsv_line(line: &str, line_no: usize, index: usize) -> Result<ParallelExample, CorpusError> {
    let mut fields = line.split('\t');
    let (Some(src), Some(tgt), None) = (fields.next(), fields.next(), fields.next()) else {
        return Err(CorpusError::Malformed {
            line: line_no,
            reason: "expected exactly two tab-separated fields".into(),
        });
    };
    build_example(index.to_string(), src, tgt, BTreeMap::new(), line_no)
}

fn parse_json_line(line: &str, line_no: usize, index: usize) -> Result<ParallelExample, CorpusError> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: line_no,
        reason: e.to_string(),
    })?;
    let id = rec.id.unwrap_or_else(|| index.to_string());
    build_example(id, &rec.source, &rec.target, rec.meta.unwrap_or_default(), line_no)
}

fn build_example(
    id: String,
    src: &str,
    tgt: &str,
    meta: BTreeMap<String, serde_json::Value>,
    line_no: usize,
) -> Result<ParallelExample, CorpusError> {
    let source = tokenize(src);
    let target = tokenize(tgt);
    if source.is_empty() || target.is_empty() {
        return Err(CorpusError::Malformed {
            line: line_no,
            reason: "source and target must both be non-empty".into(),
        });
    }
    Ok(ParallelExample {
        id,
        source,
        target,
        meta,
    })
}

pub fn write_jsonl<W: Write>(mut w: W, corpus: &[ParallelExample]) -> std::io::Result<()> {
    for ex in corpus {
        let rec = JsonRecord {
            id: Some(ex.id.clone()),
            source: ex.source.join(" "),
            target: ex.target.join(" "),
            meta: (!ex.meta.is_empty()).then(|| ex.meta.clone()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabCounts {
    pub side: Side,
    counts: BTreeMap<String, u64>,
    total_tokens: u64,
}

impl VocabCounts {
    pub fn empty(side: Side) -> Self {
        VocabCounts {
            side,
            counts: BTreeMap::new(),
            total_tokens: 0,
        }
    }

    pub fn add_tokens<S: AsRef<str>>(&mut self, tokens: &[S]) {
        for tok in tokens {
            *self.counts.entry(tok.as_ref().to_owned()).or_insert(0) += 1;
        }
        self.total_tokens += tokens.len() as u64;
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Pointwise sum; both sides must agree.
    pub fn merge(&mut self, other: &VocabCounts) {
        debug_assert_eq!(self.side, other.side);
        for (tok, c) in &other.counts {
            *self.counts.entry(tok.clone()).or_insert(0) += c;
        }
        self.total_tokens += other.total_tokens;
    }

    /// `token<TAB>count`, sorted by token.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (tok, c) in &self.counts {
            writeln!(w, "{tok}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(reader: R, side: Side) -> Result<Self, CorpusError> {
        let mut counts = VocabCounts::empty(side);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: &str| CorpusError::Malformed {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let (tok, c) = line.split_once('\t').ok_or_else(|| malformed("missing tab"))?;
            let c: u64 = c.trim().parse().map_err(|_| malformed("count is not an integer"))?;
            counts.total_tokens += c;
            counts.counts.insert(tok.to_string(), c);
        }
        Ok(counts)
    }
}

pub fn build_vocab_counts(corpus: &[ParallelExample], side: Side) -> VocabCounts {
    let mut counts = VocabCounts::empty(side);
    for ex in corpus {
        counts.add_tokens(ex.tokens(side));
    }
    counts
}

/// Keep the examples whose every token on `counts.side` occurs at least
/// `min_count` times. Order is preserved.
pub fn filter_oov(
    pool: &[ParallelExample],
    counts: &VocabCounts,
    min_count: u64,
) -> Vec<ParallelExample> {
    pool.iter()
        .filter(|ex| passes_oov(ex.tokens(counts.side), counts, min_count))
        .cloned()
        .collect()
}

pub fn passes_oov<S: AsRef<str>>(tokens: &[S], counts: &VocabCounts, min_count: u64) -> bool {
    tokens.iter().all(|t| counts.count(t.as_ref()) >= min_count)
}
