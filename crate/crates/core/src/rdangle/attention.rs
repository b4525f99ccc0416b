//! Multi-head scaled dot-product attention over already projected
//! queries, keys and values.

use super::tensor::{masked_softmax, Matrix};
use super::RdangleError;

/// Which (query, key) pairs may interact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Full,
    /// Query row `i` sits at absolute position `offset + i` and sees keys
    /// `0..=offset + i`.
    Causal { offset: usize },
    /// Queries below `source_len` see only keys below `source_len`; later
    /// queries see everything. Cuts the target-to-source flow in the
    /// fusion layers.
    SourceOnly { source_len: usize },
}

impl Mask {
    pub fn allows(&self, query: usize, key: usize) -> bool {
        match *self {
            Mask::Full => true,
            Mask::Causal { offset } => key <= offset + query,
            Mask::SourceOnly { source_len } => query >= source_len || key < source_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Concatenated head outputs, before any output projection.
    pub output: Matrix,
    /// Per head, `queries x keys` attention weights.
    pub weights: Vec<Matrix>,
}

pub fn cross_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
    mask: Mask,
) -> Result<AttentionOutput, RdangleError> {
    let mut weights = Vec::with_capacity(n_heads);
    let output = attend(queries, keys, values, n_heads, mask, Some(&mut weights))?;
    Ok(AttentionOutput { output, weights })
}

pub(crate) fn attend(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
    mask: Mask,
    mut weight_sink: Option<&mut Vec<Matrix>>,
) -> Result<Matrix, RdangleError> {
    if keys.rows() != values.rows() {
        return Err(RdangleError::Shape(format!(
            "{} key rows but {} value rows",
            keys.rows(),
            values.rows()
        )));
    }
    let d = queries.cols();
    if keys.cols() != d || values.cols() != d {
        return Err(RdangleError::Shape(format!(
            "query/key/value widths {d}/{}/{} differ",
            keys.cols(),
            values.cols()
        )));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(RdangleError::Shape(format!("width {d} not divisible into {n_heads} heads")));
    }
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let n_keys = keys.rows();
    let mut out = Matrix::zeros(queries.rows(), d);
    for h in 0..n_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let mut head_weights = weight_sink.as_ref().map(|_| Matrix::zeros(queries.rows(), n_keys));
        for i in 0..queries.rows() {
            let q = &queries.row(i)[cols.clone()];
            let scores: Vec<f32> = (0..n_keys)
                .map(|j| {
                    let k = &keys.row(j)[cols.clone()];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                })
                .collect();
            let probs = masked_softmax(&scores, |j| mask.allows(i, j))
                .ok_or_else(|| RdangleError::Shape(format!("query row {i} has no visible keys")))?;
            let dst = &mut out.row_mut(i)[cols.clone()];
            for (j, &p) in probs.iter().enumerate() {
                if !mask.allows(i, j) {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(&values.row(j)[cols.clone()]) {
                    *o += p * v;
                }
            }
            if let Some(w) = head_weights.as_mut() {
                w.row_mut(i).copy_from_slice(&probs);
            }
        }
        if let (Some(sink), Some(w)) = (weight_sink.as_mut(), head_weights) {
            sink.push(w);
        }
    }
    Ok(out)
}
