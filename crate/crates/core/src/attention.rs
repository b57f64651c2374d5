//! Single-head scaled dot-product attention with optional rotary embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrope::{apply_mrope, DimensionLayout, Position3D};
use crate::rotary::FrequencyBasis;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                actual: bad.len(),
            });
        }
        Ok(Self {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let dst = out.row_mut(i);
                for (o, b) in dst.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Token positions, either 1D or multimodal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Positions {
    Scalar(Vec<u64>),
    Multimodal(Vec<Position3D>),
}

impl Positions {
    pub fn len(&self) -> usize {
        match self {
            Positions::Scalar(p) => p.len(),
            Positions::Multimodal(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How positions enter the query/key product.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingMode {
    None,
    /// 1D rotary embedding; requires scalar positions.
    Rope(FrequencyBasis),
    /// Multimodal rotary embedding. Scalar positions `p` are read as `(p, p, p)`.
    MRope(FrequencyBasis, DimensionLayout),
}

impl EmbeddingMode {
    /// Rotates `v` in place for the token at `index`.
    pub(crate) fn rotate(&self, positions: &Positions, index: usize, v: &mut [f64]) -> Result<()> {
        match (self, positions) {
            (EmbeddingMode::None, _) => {}
            (EmbeddingMode::Rope(basis), Positions::Scalar(p)) => {
                let r = basis.apply(p[index], v)?;
                v.copy_from_slice(&r);
            }
            (EmbeddingMode::Rope(_), Positions::Multimodal(_)) => {
                return Err(Error::Configuration(
                    "1D RoPE cannot consume multimodal positions".into(),
                ))
            }
            (EmbeddingMode::MRope(basis, layout), positions) => {
                let pos = match positions {
                    Positions::Scalar(p) => Position3D::text(p[index]),
                    Positions::Multimodal(p) => p[index],
                };
                let r = apply_mrope(basis, layout, pos, v)?;
                v.copy_from_slice(&r);
            }
        }
        Ok(())
    }

    fn check(&self, d_k: usize) -> Result<()> {
        match self {
            EmbeddingMode::None => Ok(()),
            EmbeddingMode::Rope(basis) => basis.check_len(d_k),
            EmbeddingMode::MRope(basis, layout) => {
                layout.check_basis(basis)?;
                basis.check_len(d_k)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionInput {
    /// `C × d` token embeddings.
    pub x: Matrix,
    /// `d × d_k` projections.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub positions: Positions,
    pub embedding: EmbeddingMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `C × C` softmax weights.
    pub weights: Matrix,
    /// `C × d_k` attended values.
    pub output: Matrix,
}

/// `softmax(QKᵀ/√d_k)·V` with queries and keys rotated per `input.embedding`.
pub fn attention(input: &AttentionInput) -> Result<AttentionOutput> {
    let c = input.x.rows();
    if c == 0 {
        return Err(Error::EmptyInput("attention needs at least one token"));
    }
    if input.positions.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            actual: input.positions.len(),
        });
    }
    let d_k = input.w_q.cols();
    for w in [&input.w_k, &input.w_v] {
        if w.cols() != d_k || w.rows() != input.w_q.rows() {
            return Err(Error::DimensionMismatch {
                expected: d_k,
                actual: w.cols(),
            });
        }
    }
    if d_k == 0 || !d_k.is_multiple_of(2) {
        return Err(Error::InvalidDimension(d_k));
    }
    input.embedding.check(d_k)?;

    let mut q = input.x.matmul(&input.w_q)?;
    let mut k = input.x.matmul(&input.w_k)?;
    let v = input.x.matmul(&input.w_v)?;
    for i in 0..c {
        input.embedding.rotate(&input.positions, i, q.row_mut(i))?;
        input.embedding.rotate(&input.positions, i, k.row_mut(i))?;
    }

    let scale = (d_k as f64).sqrt().recip();
    let mut weights = Matrix::zeros(c, c);
    for i in 0..c {
        let qi = q.row(i);
        let row = weights.row_mut(i);
        for (j, w) in row.iter_mut().enumerate() {
            *w = dot(qi, k.row(j)) * scale;
        }
        softmax_in_place(row);
    }
    let output = weights.matmul(&v)?;
    Ok(AttentionOutput { weights, output })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
