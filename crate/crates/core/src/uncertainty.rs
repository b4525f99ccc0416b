//! Ensemble disagreement scores and uncertainty-band sampling.
//!
//! Distributions are ingested from an external dump: for each example, `M`
//! members give a categorical distribution at each of `L` positions over a
//! shared per-position support. All logs are natural (nats).

use std::cmp::Ordering;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EPSILON_FLOOR: f64 = 1e-10;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_TOP_K: usize = 16;
pub const OTHER_TOKEN: &str = "<other>";

pub const DEFAULT_DISCARD_TOP: usize = 2_000;
pub const DEFAULT_WINDOW: usize = 18_000;
pub const DEFAULT_SAMPLE: usize = 3_000;

/// Metadata strings recorded next to every score dump.
pub const RMI_FORMULA: &str = "rmi_l = (1/M) * sum_m KL(mean_l || p_{m,l}), natural log";
pub const SEQUENCE_AGGREGATION: &str = "mean of token rmi over positions";

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("example {id}: need at least 2 ensemble members, got {members}")]
    TooFewMembers { id: String, members: usize },
    #[error("example {id}: no positions")]
    NoPositions { id: String },
    #[error("example {id}: member {member} has {got} positions, expected {expected}")]
    PositionMismatch { id: String, member: usize, got: usize, expected: usize },
    #[error("example {id}: member {member} position {position} has {got} probabilities for a support of {expected}")]
    SupportMismatch { id: String, member: usize, position: usize, got: usize, expected: usize },
    #[error("example {id}: member {member} position {position} sums to {sum}")]
    Unnormalized { id: String, member: usize, position: usize, sum: f64 },
    #[error("example {id}: member {member} position {position} has an invalid probability {value}")]
    InvalidProbability { id: String, member: usize, position: usize, value: f64 },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BandError {
    #[error("sample size {sample} exceeds window {window}")]
    SampleExceedsWindow { sample: usize, window: usize },
    #[error("ranked list has {len} items but discard_top + window = {needed}")]
    TooFewRanked { len: usize, needed: usize },
}

/// One example's per-position ensemble distributions, `probs[m][l][s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTokenDistributions {
    #[serde(rename = "id")]
    pub example_id: String,
    #[serde(default)]
    pub tokens: Vec<String>,
    pub support: Vec<Vec<String>>,
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl EnsembleTokenDistributions {
    pub fn members(&self) -> usize {
        self.probs.len()
    }

    pub fn positions(&self) -> usize {
        self.support.len()
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let id = || self.example_id.clone();
        if self.members() < 2 {
            return Err(UncertaintyError::TooFewMembers { id: id(), members: self.members() });
        }
        if self.positions() == 0 {
            return Err(UncertaintyError::NoPositions { id: id() });
        }
        for (m, member) in self.probs.iter().enumerate() {
            if member.len() != self.positions() {
                return Err(UncertaintyError::PositionMismatch {
                    id: id(),
                    member: m,
                    got: member.len(),
                    expected: self.positions(),
                });
            }
            for (l, dist) in member.iter().enumerate() {
                if dist.len() != self.support[l].len() || dist.is_empty() {
                    return Err(UncertaintyError::SupportMismatch {
                        id: id(),
                        member: m,
                        position: l,
                        got: dist.len(),
                        expected: self.support[l].len(),
                    });
                }
                if let Some(&bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return Err(UncertaintyError::InvalidProbability { id: id(), member: m, position: l, value: bad });
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(UncertaintyError::Unnormalized { id: id(), member: m, position: l, sum });
                }
            }
        }
        Ok(())
    }

    /// Build a coarsened dump entry from full-vocabulary member distributions
    /// (`full[m][l][v]`). Each position keeps the union of every member's
    /// top-`top_k` tokens plus an OTHER bucket holding the residual mass.
    pub fn from_full_distributions(
        example_id: impl Into<String>,
        tokens: Vec<String>,
        vocab: &[String],
        full: &[Vec<Vec<f64>>],
        top_k: usize,
    ) -> Self {
        let positions = full.first().map_or(0, Vec::len);
        let mut support = Vec::with_capacity(positions);
        let mut probs = vec![Vec::with_capacity(positions); full.len()];
        for l in 0..positions {
            let mut keep: Vec<usize> = Vec::new();
            for member in full {
                let dist = &member[l];
                let mut order: Vec<usize> = (0..dist.len()).collect();
                order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
                keep.extend(order.into_iter().take(top_k));
            }
            keep.sort_unstable();
            keep.dedup();
            let mut sup: Vec<String> = keep.iter().map(|&v| vocab[v].clone()).collect();
            let needs_other = keep.len() < vocab.len();
            if needs_other {
                sup.push(OTHER_TOKEN.to_string());
            }
            for (m, member) in full.iter().enumerate() {
                let dist = &member[l];
                let mut row: Vec<f64> = keep.iter().map(|&v| dist[v]).collect();
                if needs_other {
                    let kept: f64 = row.iter().sum();
                    row.push((1.0 - kept).max(0.0));
                }
                probs[m].push(row);
            }
            support.push(sup);
        }
        EnsembleTokenDistributions {
            example_id: example_id.into(),
            tokens,
            support,
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    #[serde(rename = "id")]
    pub example_id: String,
    pub token_rmi: Vec<f64>,
    pub token_mi: Vec<f64>,
    pub token_entropy: Vec<f64>,
    pub sequence_score: f64,
}

/// ε-floor by mixing with the uniform mass: `(1 - Sε) p + ε`. Keeps the
/// row normalized and every entry at least ε.
pub fn smooth(dist: &[f64]) -> Vec<f64> {
    let keep = 1.0 - dist.len() as f64 * EPSILON_FLOOR;
    dist.iter().map(|p| keep * p + EPSILON_FLOOR).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * x.ln()).sum::<f64>()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a.ln() - b.ln())).sum()
}

/// Mean anchored on the first element: identical inputs give that element
/// back bit-for-bit.
fn anchored_mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(first) = it.next() else { return 0.0 };
    let count = xs.count() as f64;
    first + it.map(|x| x - first).sum::<f64>() / count
}

pub fn token_uncertainties(d: &EnsembleTokenDistributions) -> Result<UncertaintyScore, UncertaintyError> {
    d.validate()?;
    let members = d.members();
    let mut token_rmi = Vec::with_capacity(d.positions());
    let mut token_mi = Vec::with_capacity(d.positions());
    let mut token_entropy = Vec::with_capacity(d.positions());
    for l in 0..d.positions() {
        let smoothed: Vec<Vec<f64>> = d.probs.iter().map(|m| smooth(&m[l])).collect();
        let width = smoothed[0].len();
        let mean: Vec<f64> = (0..width)
            .map(|s| anchored_mean(smoothed.iter().map(move |m| m[s])))
            .collect();
        let h_mean = entropy(&mean);
        let member_entropies: Vec<f64> = smoothed.iter().map(|m| entropy(m)).collect();
        let mean_member_entropy = anchored_mean(member_entropies.iter().copied());
        let rmi = smoothed.iter().map(|m| kl(&mean, m)).sum::<f64>() / members as f64;
        // Jensen/Gibbs guarantee non-negativity; clamp rounding residue.
        token_entropy.push(h_mean.max(0.0));
        token_mi.push((h_mean - mean_member_entropy).max(0.0));
        token_rmi.push(rmi.max(0.0));
    }
    let sequence_score = mean_of(&token_rmi);
    Ok(UncertaintyScore {
        example_id: d.example_id.clone(),
        token_rmi,
        token_mi,
        token_entropy,
        sequence_score,
    })
}

fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Arithmetic mean of the per-position reverse mutual information.
pub fn sequence_knowledge_uncertainty(score: &UncertaintyScore) -> f64 {
    mean_of(&score.token_rmi)
}

/// Parse a JSONL dump, one example per line.
pub fn read_ensemble_dump<R: BufRead>(reader: R) -> Result<Vec<EnsembleTokenDistributions>, UncertaintyError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| UncertaintyError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: EnsembleTokenDistributions = serde_json::from_str(&line).map_err(|e| UncertaintyError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Sort descending by score; equal scores fall back to ascending id so the
/// order is total.
pub fn rank_by_uncertainty<T>(mut items: Vec<(T, f64)>, id: impl Fn(&T) -> &str) -> Vec<(T, f64)> {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| id(&a.0).cmp(id(&b.0))));
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandParams {
    pub discard_top: usize,
    pub window: usize,
    pub sample: usize,
}

impl Default for BandParams {
    fn default() -> Self {
        BandParams {
            discard_top: DEFAULT_DISCARD_TOP,
            window: DEFAULT_WINDOW,
            sample: DEFAULT_SAMPLE,
        }
    }
}

/// Zero-based positions in the ranked list chosen by [`band_select`],
/// ascending. A zero-based index `i` is one-based rank `i + 1`, so the
/// result lies in ranks `(discard_top, discard_top + window]`.
pub fn band_select_indices(len: usize, params: BandParams, seed: u64) -> Result<Vec<usize>, BandError> {
    if params.sample > params.window {
        return Err(BandError::SampleExceedsWindow {
            sample: params.sample,
            window: params.window,
        });
    }
    let needed = params.discard_top + params.window;
    if len < needed {
        return Err(BandError::TooFewRanked { len, needed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, params.window, params.sample)
        .into_iter()
        .map(|i| params.discard_top + i)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Drop the `discard_top` most uncertain items and draw `sample` uniformly
/// without replacement from the next `window`.
pub fn band_select<T: Clone>(ranked: &[(T, f64)], params: BandParams, seed: u64) -> Result<Vec<T>, BandError> {
    Ok(band_select_indices(ranked.len(), params, seed)?
        .into_iter()
        .map(|i| ranked[i].0.clone())
        .collect())
}
