//! Per-channel weight clipping search.
//!
//! For every output channel the truncation intensities `(γ, β)` are picked
//! from a grid by exhaustive search, minimizing the mean squared error of
//! symmetric fake quantization. The grid always contains 1.0, so the result is
//! never worse than plain min-max.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{qmax, qmin, symmetric_scale_from_range, QuantScheme};
use crate::tensor::DenseTensor;

/// Candidate clip factors `{1.0, 1.0 - step, ..., >= min}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipGrid {
    values: Vec<f32>,
}

impl ClipGrid {
    pub fn new(min: f32, step: f32) -> Result<Self> {
        if !(min > 0.0 && min <= 1.0) {
            return Err(Error::InvalidScheme(format!(
                "clip grid minimum {min} outside (0, 1]"
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidScheme(format!(
                "clip grid step {step} must be positive"
            )));
        }
        // f64 keeps 1 - i*step from drifting on long grids
        let n = ((1.0 - min as f64) / step as f64 + 1e-6).floor() as usize + 1;
        let values = (0..n)
            .map(|i| (1.0 - i as f64 * step as f64) as f32)
            .filter(|v| *v > 0.0)
            .collect();
        Ok(Self { values })
    }

    /// Only γ = β = 1: reduces the search to min-max RTN.
    pub fn identity() -> Self {
        Self { values: vec![1.0] }
    }

    /// Explicit candidates; 1.0 is added when absent.
    pub fn from_values(mut values: Vec<f32>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidScheme(format!(
                "clip candidate {v} outside (0, 1]"
            )));
        }
        if !values.contains(&1.0) {
            values.push(1.0);
        }
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        Ok(Self { values })
    }

    /// Descending, starting at 1.0.
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

impl Default for ClipGrid {
    /// `{0.50, 0.51, ..., 1.00}`.
    fn default() -> Self {
        Self::new(0.5, 0.01).expect("default grid is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mse_before: Vec<f64>,
    pub mse_after: Vec<f64>,
}

impl ClipResult {
    /// Attaches the selected factors to a symmetric per-channel scheme.
    pub fn apply_to(&self, scheme: QuantScheme) -> Result<QuantScheme> {
        scheme.with_clip(self.gamma.clone(), self.beta.clone())
    }

    pub fn mean_mse_before(&self) -> f64 {
        mean(&self.mse_before)
    }

    pub fn mean_mse_after(&self) -> f64 {
        mean(&self.mse_after)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mse_for_scale(w: &[f32], scale: f32, bits: u8) -> f64 {
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let sum: f64 = w
        .iter()
        .map(|&v| {
            let q = (v / scale).round().clamp(lo, hi);
            let d = (v - q * scale) as f64;
            d * d
        })
        .sum();
    sum / w.len() as f64
}

/// Mean squared error between `w_c` and its symmetric fake-quantized
/// reconstruction under `(γ, β)`.
pub fn channel_quant_mse(w_c: &[f32], bits: u8, gamma: f32, beta: f32) -> Result<f64> {
    let scale = crate::quant::compute_scale_symmetric(w_c, bits, gamma, beta)?;
    Ok(mse_for_scale(w_c, scale, bits))
}

/// Best `(γ, β, mse)` for one channel. Ties prefer the larger `γ + β`, then
/// the larger `γ`.
fn search_channel(w: &[f32], bits: u8, grid: &ClipGrid) -> (f32, f32, f64) {
    let (lo, hi) = w
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut best = (1.0f32, 1.0f32, f64::INFINITY);
    for &gamma in grid.values() {
        for &beta in grid.values() {
            let scale = symmetric_scale_from_range(lo, hi, bits, gamma, beta);
            let mse = mse_for_scale(w, scale, bits);
            let better = mse < best.2
                || (mse == best.2
                    && (gamma + beta > best.0 + best.1
                        || (gamma + beta == best.0 + best.1 && gamma > best.0)));
            if better {
                best = (gamma, beta, mse);
            }
        }
    }
    best
}

/// Searches `(γ, β)` independently for every row of `w`.
pub fn optimize_clipping(w: &DenseTensor, bits: u8, grid: &ClipGrid) -> Result<ClipResult> {
    if w.is_empty() {
        return Err(Error::Empty("cannot clip an empty weight"));
    }
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidScheme(format!(
            "unsupported bit width {bits} (expected 4 or 8)"
        )));
    }
    let per_channel: Vec<(f32, f32, f64, f64)> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let row = w.row(r);
            let (lo, hi) = row
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let before = mse_for_scale(row, symmetric_scale_from_range(lo, hi, bits, 1.0, 1.0), bits);
            let (g, b, after) = search_channel(row, bits, grid);
            (g, b, before, after)
        })
        .collect();

    let mut res = ClipResult {
        gamma: Vec::with_capacity(w.rows()),
        beta: Vec::with_capacity(w.rows()),
        mse_before: Vec::with_capacity(w.rows()),
        mse_after: Vec::with_capacity(w.rows()),
    };
    for (g, b, before, after) in per_channel {
        res.gamma.push(g);
        res.beta.push(b);
        res.mse_before.push(before);
        res.mse_after.push(after);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_has_51_values() {
        let g = ClipGrid::default();
        assert_eq!(g.values().len(), 51);
        assert_eq!(g.values()[0], 1.0);
        assert!((g.values()[50] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn grid_validation() {
        assert!(ClipGrid::new(0.0, 0.01).is_err());
        assert!(ClipGrid::new(0.5, 0.0).is_err());
        assert!(ClipGrid::from_values(vec![1.2]).is_err());
        assert_eq!(ClipGrid::from_values(vec![0.7]).unwrap().values(), &[1.0, 0.7]);
    }

    #[test]
    fn mse_hand_example() {
        let s = 0.4f32 / 7.0;
        let expected = [(0.4f32 - 7.0 * s), (-0.2 + 4.0 * s), (0.1 - 2.0 * s)]
            .iter()
            .map(|d| (*d as f64).powi(2))
            .sum::<f64>()
            / 3.0;
        let got = channel_quant_mse(&[0.4, -0.2, 0.1], 4, 1.0, 1.0).unwrap();
        assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn representable_channel_has_zero_mse() {
        let s = 0.125f32;
        let w: Vec<f32> = [-7i8, -3, 0, 2, 7].iter().map(|&q| q as f32 * s).collect();
        assert_eq!(channel_quant_mse(&w, 4, 1.0, 1.0).unwrap(), 0.0);
        let t = DenseTensor::new(1, 5, w).unwrap();
        let r = optimize_clipping(&t, 4, &ClipGrid::default()).unwrap();
        assert_eq!((r.gamma[0], r.beta[0]), (1.0, 1.0));
        assert_eq!(r.mse_after[0], 0.0);
    }

    #[test]
    fn homogeneity_of_mse() {
        let w = [0.31f32, -0.77, 0.05, 0.5, -0.12];
        let k = 4.0f32;
        let scaled: Vec<f32> = w.iter().map(|v| v * k).collect();
        let a = channel_quant_mse(&w, 4, 0.8, 0.9).unwrap();
        let b = channel_quant_mse(&scaled, 4, 0.8, 0.9).unwrap();
        assert!((b - a * 16.0).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn outlier_channel_is_narrowed() {
        // mass in (-0.2, 0.2) with a single outlier at -0.4
        let mut w: Vec<f32> = (0..63).map(|i| -0.19 + 0.38 * i as f32 / 62.0).collect();
        w.push(-0.4);
        let t = DenseTensor::new(1, w.len(), w).unwrap();
        let r = optimize_clipping(&t, 4, &ClipGrid::default()).unwrap();
        assert!(r.beta[0] < 1.0, "beta = {}", r.beta[0]);
        assert!(r.mse_after[0] < r.mse_before[0]);
    }

    #[test]
    fn identity_grid_is_plain_rtn() {
        let w = DenseTensor::from_fn(4, 16, |r, c| ((r * 31 + c * 7) as f32 * 0.13).sin()).unwrap();
        let r = optimize_clipping(&w, 4, &ClipGrid::identity()).unwrap();
        assert_eq!(r.mse_before, r.mse_after);
        assert!(r.gamma.iter().chain(&r.beta).all(|&v| v == 1.0));
    }

    #[test]
    fn empty_weight() {
        assert!(optimize_clipping(&DenseTensor::zeros(0, 4), 4, &ClipGrid::default()).is_err());
        assert!(channel_quant_mse(&[], 4, 1.0, 1.0).is_err());
    }

    fn weights() -> impl Strategy<Value = DenseTensor> {
        (1usize..5, 2usize..24).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1.0f32..1.0, r * c)
                .prop_map(move |d| DenseTensor::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn never_worse_than_min_max(w in weights(), bits in prop_oneof![Just(4u8), Just(8u8)]) {
            let r = optimize_clipping(&w, bits, &ClipGrid::new(0.5, 0.05).unwrap()).unwrap();
            for c in 0..w.rows() {
                prop_assert!(r.mse_after[c] <= r.mse_before[c]);
                prop_assert!(r.gamma[c] > 0.0 && r.gamma[c] <= 1.0);
                prop_assert!(r.beta[c] > 0.0 && r.beta[c] <= 1.0);
            }
        }

        #[test]
        fn channel_permutation_invariant(w in weights()) {
            let grid = ClipGrid::new(0.5, 0.05).unwrap();
            let rows = w.rows();
            let rev = DenseTensor::from_fn(rows, w.cols(), |r, c| w.get(rows - 1 - r, c)).unwrap();
            let a = optimize_clipping(&w, 4, &grid).unwrap();
            let b = optimize_clipping(&rev, 4, &grid).unwrap();
            for r in 0..rows {
                prop_assert_eq!(a.gamma[r], b.gamma[rows - 1 - r]);
                prop_assert_eq!(a.beta[r], b.beta[rows - 1 - r]);
                prop_assert_eq!(a.mse_after[r], b.mse_after[rows - 1 - r]);
            }
        }

        #[test]
        fn power_of_two_scaling_keeps_selection(w in weights(), e in -3i32..4) {
            let k = 2f32.powi(e);
            let grid = ClipGrid::new(0.5, 0.05).unwrap();
            let scaled = DenseTensor::new(w.rows(), w.cols(), w.data().iter().map(|v| v * k).collect()).unwrap();
            let a = optimize_clipping(&w, 4, &grid).unwrap();
            let b = optimize_clipping(&scaled, 4, &grid).unwrap();
            prop_assert_eq!(&a.gamma, &b.gamma);
            prop_assert_eq!(&a.beta, &b.beta);
            for c in 0..w.rows() {
                let expect = a.mse_after[c] * (k as f64).powi(2);
                prop_assert!((b.mse_after[c] - expect).abs() <= 1e-12 * expect.max(1e-30));
            }
        }
    }
}
