//! Minimum n-gram cover of a sentence and its compositional degree.
//!
//! The cover is the segmentation into the fewest atoms, where an atom is a
//! dictionary entry or, as a fallback, a single token no entry starts with.
//! Degree is `atoms / tokens`, so 1.0 means every token stands alone.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ParallelExample, Side};
use crate::ngram_index::NGramDictionary;

pub const DEFAULT_POOL_K: usize = 60_000;

/// Recorded alongside selections so downstream readers know how
/// "non-overlapping" was interpreted.
pub const NON_OVERLAP_POLICY: &str = "exact-duplicate removal on the scored side";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DegreeError {
    #[error("cover spans {cover} tokens but sentence length is {length}")]
    LengthMismatch { cover: usize, length: usize },
    #[error("cannot cover an empty sentence")]
    EmptySentence,
    #[error("score dump line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub span: Range<usize>,
    /// False for fallback singletons that match no dictionary entry.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverResult {
    pub atoms: Vec<Atom>,
    length: usize,
}

impl CoverResult {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Per-token coverage flag.
    pub fn covered(&self) -> Vec<bool> {
        let mut out = vec![false; self.length];
        for atom in &self.atoms {
            out[atom.span.clone()].fill(atom.covered);
        }
        out
    }

    pub fn atom_tokens<'a, S: AsRef<str>>(&self, sentence: &'a [S]) -> Vec<&'a [S]> {
        self.atoms.iter().map(|a| &sentence[a.span.clone()]).collect()
    }
}

/// Fewest-atom segmentation by forward DP over the prefix tree.
///
/// Among segmentations of equal size the one whose last segment is longest
/// wins, applied recursively from the end, so `atoms` is reproducible.
pub fn min_cover<S: AsRef<str>>(sentence: &[S], dict: &NGramDictionary) -> Result<CoverResult, DegreeError> {
    if sentence.is_empty() {
        return Err(DegreeError::EmptySentence);
    }
    let ids = dict.encode(sentence);
    Ok(min_cover_encoded(&ids, dict))
}

pub(crate) fn min_cover_encoded(ids: &[Option<u32>], dict: &NGramDictionary) -> CoverResult {
    let n = ids.len();
    // best[i] = (atoms covering ids[..i], start of last atom, last atom covered)
    let mut best: Vec<(usize, usize, bool)> = vec![(usize::MAX, 0, false); n + 1];
    best[0] = (0, 0, true);
    for start in 0..n {
        let base = best[start].0;
        let mut unit_matched = false;
        dict.for_each_match(ids, start, |len| {
            unit_matched |= len == 1;
            // strict '<' keeps the earliest start, i.e. the longest last atom
            if base + 1 < best[start + len].0 {
                best[start + len] = (base + 1, start, true);
            }
        });
        if !unit_matched && base + 1 < best[start + 1].0 {
            best[start + 1] = (base + 1, start, false);
        }
    }
    let mut atoms = Vec::with_capacity(best[n].0);
    let mut end = n;
    while end > 0 {
        let (_, start, covered) = best[end];
        atoms.push(Atom {
            span: start..end,
            covered,
        });
        end = start;
    }
    atoms.reverse();
    CoverResult { atoms, length: n }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionalDegree {
    pub atom_count: usize,
    pub length: usize,
}

impl CompositionalDegree {
    pub fn value(&self) -> f64 {
        self.atom_count as f64 / self.length as f64
    }

    /// Exact comparison of the two ratios by cross-multiplication.
    pub fn cmp_ratio(&self, other: &Self) -> Ordering {
        let lhs = self.atom_count as u128 * other.length as u128;
        let rhs = other.atom_count as u128 * self.length as u128;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for CompositionalDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {} = {:.2}", self.atom_count, self.length, self.value())
    }
}

pub fn compositional_degree(cover: &CoverResult, length: usize) -> Result<CompositionalDegree, DegreeError> {
    if length == 0 || cover.length != length {
        return Err(DegreeError::LengthMismatch {
            cover: cover.length,
            length,
        });
    }
    Ok(CompositionalDegree {
        atom_count: cover.atom_count(),
        length,
    })
}

/// Cover + degree of one side of every example, in parallel, order kept.
pub fn score_examples(
    examples: &[ParallelExample],
    dict: &NGramDictionary,
    side: Side,
) -> Result<Vec<CompositionalDegree>, (usize, DegreeError)> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let tokens = ex.tokens(side);
            let cover = min_cover(tokens, dict).map_err(|e| (i, e))?;
            compositional_degree(&cover, tokens.len()).map_err(|e| (i, e))
        })
        .collect()
}

/// `id<TAB>atom_count<TAB>length<TAB>degree` per line.
pub fn write_score_dump<W: Write>(
    mut w: W,
    examples: &[ParallelExample],
    degrees: &[CompositionalDegree],
) -> std::io::Result<()> {
    for (ex, d) in examples.iter().zip(degrees) {
        writeln!(w, "{}\t{}\t{}\t{}", ex.id, d.atom_count, d.length, d.value())?;
    }
    Ok(())
}

/// Inverse of [`write_score_dump`]; the degree column is recomputed from
/// the counts rather than trusted.
pub fn read_score_dump<R: BufRead>(reader: R) -> Result<Vec<(String, CompositionalDegree)>, DegreeError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let malformed = |reason: String| DegreeError::Malformed { line: i + 1, reason };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| malformed(format!("{s:?}: {e}")));
        let (atom_count, length) = (num(fields[1])?, num(fields[2])?);
        if length == 0 || atom_count == 0 || atom_count > length {
            return Err(malformed(format!("impossible degree {atom_count}/{length}")));
        }
        out.push((fields[0].to_string(), CompositionalDegree { atom_count, length }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    pub examples: Vec<ParallelExample>,
    pub degrees: Vec<CompositionalDegree>,
    pub duplicates_removed: usize,
    /// Set when fewer than `k` distinct examples were available.
    pub underfilled: bool,
}

/// Top-`k` distinct examples by degree.
///
/// Exact duplicates of the scored side are dropped first (first occurrence
/// wins). Ranking is degree descending, then shorter sentence, then corpus
/// order.
pub fn select_candidate_pool(
    scored: Vec<(ParallelExample, CompositionalDegree)>,
    k: usize,
    side: Side,
) -> PoolSelection {
    let total = scored.len();
    let mut seen: HashSet<Vec<String>> = HashSet::with_capacity(total);
    let mut unique: Vec<(usize, ParallelExample, CompositionalDegree)> = scored
        .into_iter()
        .enumerate()
        .filter(|(_, (ex, _))| seen.insert(ex.tokens(side).to_vec()))
        .map(|(i, (ex, d))| (i, ex, d))
        .collect();
    let duplicates_removed = total - unique.len();
    let underfilled = k > unique.len();
    let rank = |a: &(usize, ParallelExample, CompositionalDegree), b: &(usize, ParallelExample, CompositionalDegree)| {
        b.2.cmp_ratio(&a.2)
            .then(a.2.length.cmp(&b.2.length))
            .then(a.0.cmp(&b.0))
    };
    if k < unique.len() {
        if k > 0 {
            unique.select_nth_unstable_by(k - 1, rank);
        }
        unique.truncate(k);
    }
    unique.sort_unstable_by(rank);
    let (examples, degrees) = unique.into_iter().map(|(_, ex, d)| (ex, d)).unzip();
    PoolSelection {
        examples,
        degrees,
        duplicates_removed,
        underfilled,
    }
}
