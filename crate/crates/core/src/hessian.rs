//! Hessian-based error compensation (GPTQ-style).
//!
//! Each weight row is quantized column by column. After quantizing column
//! `i`, the rounding error is spread over the not-yet-quantized columns in
//! proportion to the corresponding row of the upper Cholesky factor of
//! `(H + λI)⁻¹`, which is the sequential form of
//! `δ_F = -(w_i - q(w_i)) / [H_F⁻¹]_ii · (H_F⁻¹)_{:,i}`.
//!
//! Scales are fixed before the sweep (min-max, or clipped when the scheme
//! carries clip factors) and never recomputed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{
    dequantize, quantize_value, symmetric_scale_from_range, Granularity, QuantScheme,
    QuantizedTensor,
};
use crate::tensor::{matmul_f32, DenseTensor};

/// Damping as a fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMP_RATIO: f64 = 0.01;
/// Columns per lazy-update block.
pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// Accumulated `H = 2 Σ xᵀx` over calibration rows, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    dim: usize,
    h: Vec<f64>,
    sample_count: usize,
    damping: Option<f64>,
    damp_ratio: Option<f64>,
    inv_factor: Option<Vec<f64>>,
}

impl HessianState {
    pub fn new(in_features: usize) -> Self {
        Self {
            dim: in_features,
            h: vec![0.0; in_features * in_features],
            sample_count: 0,
            damping: None,
            damp_ratio: None,
            inv_factor: None,
        }
    }

    /// Wraps an explicit symmetric matrix, e.g. `2·I` for uncorrelated inputs.
    pub fn from_matrix(dim: usize, h: Vec<f64>) -> Result<Self> {
        if h.len() != dim * dim {
            return Err(Error::Shape(format!(
                "{} entries for a {dim}x{dim} hessian",
                h.len()
            )));
        }
        Ok(Self {
            dim,
            h,
            sample_count: 0,
            damping: None,
            damp_ratio: None,
            inv_factor: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }

    /// Damping applied by the last [`factorize`](Self::factorize).
    pub fn damping(&self) -> Option<f64> {
        self.damping
    }

    /// Upper-triangular `U` with `Uᵀ U = (H + λI)⁻¹`, once factorized.
    pub fn inv_factor(&self) -> Option<&[f64]> {
        self.inv_factor.as_deref()
    }

    /// Adds `2·xᵀx` for a `(samples, in_features)` batch.
    pub fn accumulate(&mut self, x_batch: &DenseTensor) -> Result<()> {
        if x_batch.cols() != self.dim {
            return Err(Error::Shape(format!(
                "batch has {} features, hessian expects {}",
                x_batch.cols(),
                self.dim
            )));
        }
        let n = self.dim;
        let rows = x_batch.rows();
        self.h.par_chunks_mut(n).enumerate().for_each(|(i, h_row)| {
            for s in 0..rows {
                let x = x_batch.row(s);
                let xi = x[i] as f64;
                if xi == 0.0 {
                    continue;
                }
                for (h, &xj) in h_row.iter_mut().zip(x) {
                    *h += 2.0 * xi * xj as f64;
                }
            }
        });
        self.sample_count += rows;
        self.damping = None;
        self.damp_ratio = None;
        self.inv_factor = None;
        Ok(())
    }

    /// Damps the diagonal by `damp_ratio · mean(diag H)` and stores the upper
    /// Cholesky factor of the damped inverse. Columns never seen by the
    /// calibration data (zero diagonal) get a unit diagonal.
    pub fn factorize(&mut self, damp_ratio: f64) -> Result<()> {
        let n = self.dim;
        let mut a = self.h.clone();
        for i in 0..n {
            if a[i * n + i] == 0.0 {
                a[i * n + i] = 1.0;
            }
        }
        let mean_diag = if n == 0 {
            0.0
        } else {
            (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64
        };
        let damping = damp_ratio * mean_diag;
        for i in 0..n {
            a[i * n + i] += damping;
        }
        let l = cholesky_lower(&a, n)?;
        let inv = inverse_from_cholesky(&l, n);
        let l_inv = cholesky_lower(&inv, n)?;
        // U = Lᵀ of the inverse
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                u[i * n + j] = l_inv[j * n + i];
            }
        }
        self.damping = Some(damping);
        self.damp_ratio = Some(damp_ratio);
        self.inv_factor = Some(u);
        Ok(())
    }
}

/// Free-function form of [`HessianState::accumulate`].
pub fn accumulate_hessian(mut state: HessianState, x_batch: &DenseTensor) -> Result<HessianState> {
    state.accumulate(x_batch)?;
    Ok(state)
}

fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// `(L Lᵀ)⁻¹` from a lower Cholesky factor.
fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // L⁻¹ by forward substitution, column by column
    let mut li = vec![0.0; n * n];
    for c in 0..n {
        li[c * n + c] = 1.0 / l[c * n + c];
        for i in c + 1..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[i * n + k] * li[k * n + c];
            }
            li[i * n + c] = s / l[i * n + i];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += li[k * n + i] * li[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptqConfig {
    pub damp_ratio: f64,
    pub block_size: usize,
    /// Process columns in descending `diag(H)` order instead of by index.
    pub reorder: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            damp_ratio: DEFAULT_DAMP_RATIO,
            block_size: DEFAULT_BLOCK_SIZE,
            reorder: false,
        }
    }
}

/// Quantizes `w` with error compensation using the defaults plus `reorder`.
pub fn gptq_quantize_layer(
    w: &DenseTensor,
    state: &mut HessianState,
    scheme: &QuantScheme,
    reorder: bool,
) -> Result<QuantizedTensor> {
    let cfg = GptqConfig {
        reorder,
        ..GptqConfig::default()
    };
    gptq_quantize_layer_with(w, state, scheme, &cfg)
}

pub fn gptq_quantize_layer_with(
    w: &DenseTensor,
    state: &mut HessianState,
    scheme: &QuantScheme,
    cfg: &GptqConfig,
) -> Result<QuantizedTensor> {
    if w.is_empty() {
        return Err(Error::Empty("cannot quantize an empty weight"));
    }
    let (rows, cols) = w.shape();
    if state.dim() != cols {
        return Err(Error::Shape(format!(
            "weight has {cols} input features, hessian is {0}x{0}",
            state.dim()
        )));
    }
    if !scheme.symmetric {
        return Err(Error::InvalidScheme(
            "compensation requires a symmetric scheme".into(),
        ));
    }
    if !matches!(
        scheme.granularity,
        Granularity::PerChannel | Granularity::PerGroup(_)
    ) {
        return Err(Error::InvalidScheme(format!(
            "compensation supports per-channel or per-group weights, not {}",
            scheme.granularity
        )));
    }
    scheme.validate_for_weight(rows, cols)?;
    if cfg.block_size == 0 {
        return Err(Error::InvalidScheme("block size must be positive".into()));
    }
    if state.inv_factor.is_none() || state.damp_ratio != Some(cfg.damp_ratio) {
        state.factorize(cfg.damp_ratio)?;
    }
    let u = state.inv_factor.as_deref().expect("factorized above");

    let format = scheme.format();
    let bits = scheme.bits;
    let group = scheme.granularity.group_size().unwrap_or(cols);
    let groups = cols / group;

    // frozen scales from the unmodified weight
    let mut scales = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let (gamma, beta) = scheme.clip.for_row(r);
        for seg in w.row(r).chunks(group) {
            let (lo, hi) = seg
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            scales.push(symmetric_scale_from_range(lo, hi, bits, gamma, beta));
        }
    }

    let order: Vec<usize> = if cfg.reorder {
        let mut idx: Vec<usize> = (0..cols).collect();
        idx.sort_by(|&a, &b| state.get(b, b).total_cmp(&state.get(a, a)).then(a.cmp(&b)));
        idx
    } else {
        (0..cols).collect()
    };
    // factor of the permuted hessian
    let u_perm: std::borrow::Cow<'_, [f64]> = if cfg.reorder {
        let mut h = vec![0.0; cols * cols];
        for (pi, &i) in order.iter().enumerate() {
            for (pj, &j) in order.iter().enumerate() {
                h[pi * cols + pj] = state.get(i, j);
            }
        }
        let mut permuted = HessianState::from_matrix(cols, h)?;
        permuted.factorize(cfg.damp_ratio)?;
        std::borrow::Cow::Owned(permuted.inv_factor.expect("factorized"))
    } else {
        std::borrow::Cow::Borrowed(u)
    };
    let u = &*u_perm;

    let block = cfg.block_size;
    let codes_per_row: Vec<Vec<i8>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let row_scales = &scales[r * groups..(r + 1) * groups];
            let mut work: Vec<f64> = order.iter().map(|&c| w.get(r, c) as f64).collect();
            let mut codes_perm = vec![0i8; cols];
            let mut errs = vec![0.0f64; block];
            let mut start = 0;
            while start < cols {
                let end = (start + block).min(cols);
                for i in start..end {
                    let s = row_scales[order[i] / group];
                    let q = quantize_value(work[i] as f32, s, bits);
                    codes_perm[i] = q;
                    let err = (work[i] - q as f64 * s as f64) / u[i * cols + i];
                    for j in i + 1..end {
                        work[j] -= err * u[i * cols + j];
                    }
                    errs[i - start] = err;
                }
                // lazy update of the columns after this block
                for j in end..cols {
                    let mut delta = 0.0;
                    for i in start..end {
                        delta += errs[i - start] * u[i * cols + j];
                    }
                    work[j] -= delta;
                }
                start = end;
            }
            let mut codes = vec![0i8; cols];
            for (pi, &c) in order.iter().enumerate() {
                codes[c] = codes_perm[pi];
            }
            codes
        })
        .collect();

    let codes = codes_per_row.into_iter().flatten().collect();
    QuantizedTensor::from_codes(rows, cols, format, codes, scales, None)
}

/// `‖(W − dequantize(W_q))·Xᵀ‖²_F` for calibration rows `x` of shape
/// `(samples, in_features)`.
pub fn layerwise_error(w: &DenseTensor, w_q: &QuantizedTensor, x: &DenseTensor) -> Result<f64> {
    if w.shape() != w_q.shape() {
        return Err(Error::Shape(format!(
            "weight {:?} vs quantized {:?}",
            w.shape(),
            w_q.shape()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "activations have {} features, weight expects {}",
            x.cols(),
            w.cols()
        )));
    }
    let delta = w.sub(&dequantize(w_q))?;
    let out = matmul_f32(x, &delta)?;
    Ok(out.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
}
