use sha2::{Digest, Sha256};

use super::RdangleError;

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, RdangleError> {
        if data.len() != rows * cols {
            return Err(RdangleError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, RdangleError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(RdangleError::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<f32> {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// First `n` rows.
    pub fn truncate_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn append_rows(&mut self, other: &Matrix) {
        debug_assert!(self.rows == 0 || self.cols == other.cols);
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// SHA-256 over shape and little-endian element bits, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `y = x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols, self.weight.rows);
        let out_cols = self.weight.cols;
        let mut out = Matrix::zeros(x.rows, out_cols);
        for r in 0..x.rows {
            let dst = &mut out.data[r * out_cols..(r + 1) * out_cols];
            for (i, &xi) in x.row(r).iter().enumerate() {
                for (d, &w) in dst.iter_mut().zip(self.weight.row(i)) {
                    *d += xi * w;
                }
            }
            for (d, b) in dst.iter_mut().zip(&self.bias) {
                *d += b;
            }
        }
        out
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    /// gamma = 1, beta = 0.
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        let d = x.cols as f32;
        for r in 0..x.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f32>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Max-subtracted softmax over the entries where `allowed` is true; the
/// rest get exactly zero weight.
pub fn masked_softmax(scores: &[f32], allowed: impl Fn(usize) -> bool) -> Option<Vec<f32>> {
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &s)| s)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return None;
    }
    let mut out = vec![0.0f32; scores.len()];
    let mut sum = 0.0f32;
    for (j, &s) in scores.iter().enumerate() {
        if allowed(j) {
            let e = (s - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Some(out)
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
