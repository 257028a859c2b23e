//! Row-major dense matrices and the reference f32 matmul.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of finite f32 values.
///
/// Weights are stored as `(out_features, in_features)` and activations as
/// `(tokens, features)`, so every GEMM in this crate consumes the weight
/// operand in transposed form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        DenseTensor::new(self.rows, self.cols, data)
    }
}

/// `a · b_transposedᵀ`: `out[i][j] = Σ_k a[i][k] · b[j][k]`.
///
/// Each output element is accumulated left to right over `k` in a single f32
/// accumulator. Rows are computed in parallel, which cannot change the result.
pub fn matmul_f32(a: &DenseTensor, b_transposed: &DenseTensor) -> Result<DenseTensor> {
    if a.cols != b_transposed.cols {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {:?} x {:?}ᵀ",
            a.shape(),
            b_transposed.shape()
        )));
    }
    let (m, n) = (a.rows, b_transposed.rows);
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            let a_row = a.row(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (x, w) in a_row.iter().zip(b_transposed.row(j)) {
                    acc += x * w;
                }
                *o = acc;
            }
        });
    }
    // products of finite values can still overflow to inf
    DenseTensor::new(m, n, out)
}
