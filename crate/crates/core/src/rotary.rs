//! One-dimensional rotary position embeddings.
//!
//! A [`FrequencyBasis`] holds the per-block angles `θ_d = b^(-2d/D)` for a head
//! of dimension `D`. Position `i` rotates the `d`-th coordinate pair
//! `(v[2d], v[2d + 1])` by `i·θ_d`. Block indices are zero-based, so `θ_0 = 1`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-block rotary angles for a head of dimension `head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBasis {
    head_dim: usize,
    base: f64,
    angles: Vec<f64>,
}

impl FrequencyBasis {
    /// Builds the standard basis `θ_d = base^(-2d/head_dim)`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        check_head_dim(head_dim)?;
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::InvalidBase(base));
        }
        // powf is correctly rounded for every (dim, base) pair we test against
        // a 50-digit reference; exp(-x·ln b) drifts by a few ulp.
        let angles = (0..head_dim / 2)
            .map(|d| base.powf(-((2 * d) as f64) / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            angles,
        })
    }

    /// Wraps an explicit angle table, e.g. the output of a context-extension
    /// transform. `base` is recorded as the effective base of the table.
    ///
    /// Unlike [`FrequencyBasis::new`], `angles[0]` need not be 1.
    pub fn from_angles(head_dim: usize, base: f64, angles: Vec<f64>) -> Result<Self> {
        check_head_dim(head_dim)?;
        if angles.len() != head_dim / 2 {
            return Err(Error::DimensionMismatch {
                expected: head_dim / 2,
                actual: angles.len(),
            });
        }
        if let Some(bad) = angles.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "rotary angles must be positive and finite, got {bad}"
            )));
        }
        Ok(Self {
            head_dim,
            base,
            angles,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Number of 2×2 rotation blocks, `head_dim / 2`.
    pub fn num_blocks(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Position period of block `d`: `λ_d = 2π / θ_d`.
    pub fn wavelength(&self, d: usize) -> Result<f64> {
        let theta = self.angles.get(d).ok_or(Error::IndexOutOfRange {
            index: d,
            len: self.angles.len(),
        })?;
        Ok(TAU / theta)
    }

    /// Materializes `R(θ, position)`.
    pub fn rotation_matrix(&self, position: u64) -> RotationMatrix {
        RotationMatrix::from_angles(&self.angles, position)
    }

    /// Computes `R(θ, position) · v` by rotating coordinate pairs in place,
    /// without building the matrix.
    pub fn apply(&self, position: u64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut out = v.to_vec();
        for (d, theta) in self.angles.iter().enumerate() {
            rotate_pair(&mut out, d, position as f64 * theta);
        }
        Ok(out)
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim,
                actual: len,
            });
        }
        Ok(())
    }
}

fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::InvalidDimension(head_dim));
    }
    Ok(())
}

/// Rotates `(v[2d], v[2d+1])` by `angle` radians.
#[inline]
pub(crate) fn rotate_pair(v: &mut [f64], d: usize, angle: f64) {
    let (sin, cos) = angle.sin_cos();
    let (x, y) = (v[2 * d], v[2 * d + 1]);
    v[2 * d] = x * cos - y * sin;
    v[2 * d + 1] = x * sin + y * cos;
}

/// Block-diagonal rotation matrix made of 2×2 blocks.
///
/// Only the diagonal blocks are stored; every other entry is exactly zero.
/// [`RotationMatrix::to_dense`] gives the full square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    /// Row-major `[m00, m01, m10, m11]` per block.
    blocks: Vec<[f64; 4]>,
}

impl RotationMatrix {
    pub fn identity(dim: usize) -> Result<Self> {
        check_head_dim(dim)?;
        Ok(Self {
            blocks: vec![[1.0, 0.0, 0.0, 1.0]; dim / 2],
        })
    }

    /// Block `d` is the planar rotation by `position · angles[d]`.
    pub fn from_angles(angles: &[f64], position: u64) -> Self {
        let blocks = angles
            .iter()
            .map(|theta| {
                let (sin, cos) = (position as f64 * theta).sin_cos();
                [cos, -sin, sin, cos]
            })
            .collect();
        Self { blocks }
    }

    pub(crate) fn from_blocks(blocks: Vec<[f64; 4]>) -> Self {
        Self { blocks }
    }

    pub fn dim(&self) -> usize {
        2 * self.blocks.len()
    }

    pub fn block(&self, d: usize) -> [f64; 4] {
        self.blocks[d]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if row / 2 != col / 2 {
            return 0.0;
        }
        self.blocks[row / 2][2 * (row % 2) + col % 2]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n)
            .map(|r| (0..n).map(|c| self.get(r, c)).collect())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|&[a, b, c, d]| [a, c, b, d])
            .collect();
        Self { blocks }
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &RotationMatrix) -> Result<Self> {
        if self.dim() != rhs.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: rhs.dim(),
            });
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&rhs.blocks)
            .map(|(&[a, b, c, d], &[e, f, g, h])| {
                [a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h]
            })
            .collect();
        Ok(Self { blocks })
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: v.len(),
            });
        }
        let mut out = vec![0.0; v.len()];
        for (d, &[a, b, c, e]) in self.blocks.iter().enumerate() {
            out[2 * d] = a * v[2 * d] + b * v[2 * d + 1];
            out[2 * d + 1] = c * v[2 * d] + e * v[2 * d + 1];
        }
        Ok(out)
    }

    /// Largest absolute entrywise difference. Off-block entries are zero in
    /// both operands, so comparing blocks covers the full matrix.
    pub fn max_abs_diff(&self, other: &RotationMatrix) -> f64 {
        assert_eq!(self.dim(), other.dim(), "matrix dimensions differ");
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// `max |MᵀM − I|` over all entries.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.transpose().compose(self).expect("same dimension");
        let identity = Self::identity(self.dim()).expect("even dimension");
        gram.max_abs_diff(&identity)
    }

    pub fn block_determinants(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|[a, b, c, d]| a * d - b * c)
            .collect()
    }
}
