//! Seeded synthetic weights and activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::DenseTensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// i.i.d. `N(0, std²)` entries.
pub fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> DenseTensor {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    DenseTensor::new(rows, cols, data).expect("gaussian samples are finite")
}

/// Gaussian weights where each element is, with probability `outlier_rate`,
/// replaced by `±outlier_sigma · std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierSpec {
    pub std: f32,
    pub outlier_rate: f64,
    pub outlier_sigma: f32,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            std: 0.02,
            outlier_rate: 0.01,
            outlier_sigma: 5.0,
        }
    }
}

/// Returns the weight and, per row, whether it received any outlier.
pub fn gaussian_with_outliers(
    rows: usize,
    cols: usize,
    spec: OutlierSpec,
    rng: &mut impl Rng,
) -> (DenseTensor, Vec<bool>) {
    let dist = Normal::new(0.0f32, spec.std).expect("std must be finite and non-negative");
    let mut flagged = vec![false; rows];
    let mut data = Vec::with_capacity(rows * cols);
    for flag in flagged.iter_mut() {
        for _ in 0..cols {
            let v = dist.sample(rng);
            if rng.random_bool(spec.outlier_rate) {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                data.push(sign * spec.outlier_sigma * spec.std);
                *flag = true;
            } else {
                data.push(v);
            }
        }
    }
    (
        DenseTensor::new(rows, cols, data).expect("samples are finite"),
        flagged,
    )
}

/// Correlated Gaussian calibration activations: isotropic noise plus a
/// shared low-rank component, `x = z + strength · f·M` with `f` of shape
/// `(rows, rank)` and `M` of shape `(rank, cols)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibSpec {
    pub rank: usize,
    pub strength: f32,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            strength: 0.75,
        }
    }
}

pub fn calibration_activations(
    rows: usize,
    cols: usize,
    spec: CalibSpec,
    rng: &mut impl Rng,
) -> DenseTensor {
    let noise = gaussian(rows, cols, 1.0, rng);
    let factors = gaussian(rows, spec.rank, 1.0, rng);
    let mixing = gaussian(spec.rank, cols, 1.0, rng);
    DenseTensor::from_fn(rows, cols, |r, c| {
        let shared: f32 = (0..spec.rank).map(|f| factors.get(r, f) * mixing.get(f, c)).sum();
        noise.get(r, c) + spec.strength * shared
    })
    .expect("samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = gaussian(4, 5, 1.0, &mut seeded_rng(1));
        let b = gaussian(4, 5, 1.0, &mut seeded_rng(1));
        assert_eq!(a, b);
        let (w, flags) = gaussian_with_outliers(8, 64, OutlierSpec { outlier_rate: 0.5, ..Default::default() }, &mut seeded_rng(2));
        assert!(flags.iter().all(|&f| f));
        assert!(w.data().iter().any(|v| (v.abs() - 0.1).abs() < 1e-7));
    }
}
