//! Software mixed-precision GEMM pipelines.
//!
//! All engines compute `out[i][j] = Σ_k a[i][k] · w[j][k]` for activations of
//! shape `(M, K)` and weights of shape `(N, K)`, and differ in where the
//! integer-to-real conversions happen:
//!
//! | engine        | integer work          | dequantization                  |
//! |---------------|-----------------------|---------------------------------|
//! | W4A16 grouped | none                  | every weight element, per (i, j) |
//! | W4A8 grouped  | INT8 MAC per group    | once per group per output       |
//! | W4A8 asym     | widened INT32 MAC     | once per output                 |
//! | W4A8 fast     | INT8 MAC on `q·16`    | once per output                 |
//! | W8A8          | INT8 MAC              | once per output                 |
//!
//! Every engine records [`GemmCounters`] derived from its loop structure.
//! Output rows are computed in parallel; each output element is accumulated
//! in a fixed order, so results do not depend on the thread count.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pack::{pack_uint4_offset, PackedInt4Buffer, UINT4_ZERO_POINT};
use crate::quant::{Granularity, Payload, QuantizedTensor};
use crate::tensor::DenseTensor;

/// Largest K for which the fast path's 32-bit accumulator cannot overflow
/// (|a| ≤ 127 from per-token quantization, |16·w| ≤ 128).
pub const FAST_MAX_K: usize = 1 << 17;
/// Largest K for the W8A8 path (127 · 127 · K < 2³¹ with margin).
pub const W8A8_MAX_K: usize = 1 << 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct GemmCounters {
    /// Integer multiply-accumulates.
    pub int8_mac_ops: u64,
    /// Integer→real conversions each followed by a multiply-add.
    pub dequant_events: u64,
    /// Widened subtractions of a weight zero point.
    pub zero_point_sub_ops: u64,
    /// Output elements scaled once after accumulation finished.
    pub final_scale_ops: u64,
}

impl Add for GemmCounters {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            int8_mac_ops: self.int8_mac_ops + o.int8_mac_ops,
            dequant_events: self.dequant_events + o.dequant_events,
            zero_point_sub_ops: self.zero_point_sub_ops + o.zero_point_sub_ops,
            final_scale_ops: self.final_scale_ops + o.final_scale_ops,
        }
    }
}

impl AddAssign for GemmCounters {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for GemmCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GemmOutput {
    pub output: DenseTensor,
    pub counters: GemmCounters,
}

/// Weights stored as `code + 8` unsigned nibbles with explicit per-channel
/// integer zero points; the input of the vanilla asymmetric pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPackedWeights {
    rows: usize,
    cols: usize,
    packed: PackedInt4Buffer,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
}

impl OffsetPackedWeights {
    pub fn new(
        rows: usize,
        cols: usize,
        packed: PackedInt4Buffer,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
    ) -> Result<Self> {
        if packed.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} packed values for a {rows}x{cols} weight",
                packed.len()
            )));
        }
        if scales.len() != rows || zero_points.len() != rows {
            return Err(Error::Shape(format!(
                "{} scales and {} zero points for {rows} channels",
                scales.len(),
                zero_points.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            packed,
            scales,
            zero_points,
        })
    }

    /// Re-encodes symmetric per-channel 4-bit codes with the +8 offset.
    pub fn from_quantized(w_q: &QuantizedTensor) -> Result<Self> {
        check_fast_weight(w_q)?;
        let packed = pack_uint4_offset(&w_q.codes())?;
        Self::new(
            w_q.rows(),
            w_q.cols(),
            packed,
            w_q.scales().to_vec(),
            vec![UINT4_ZERO_POINT; w_q.rows()],
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed(&self) -> &PackedInt4Buffer {
        &self.packed
    }

    pub fn packed_mut(&mut self) -> &mut PackedInt4Buffer {
        &mut self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn check_activation(a_q: &QuantizedTensor) -> Result<()> {
    let f = a_q.format();
    if f.bits != 8 || !f.symmetric || f.granularity != Granularity::PerToken {
        return Err(Error::InvalidScheme(format!(
            "activations must be symmetric 8-bit per-token, got {}-bit {} {}",
            f.bits,
            if f.symmetric { "symmetric" } else { "asymmetric" },
            f.granularity
        )));
    }
    Ok(())
}

fn check_fast_weight(w_q: &QuantizedTensor) -> Result<()> {
    let f = w_q.format();
    if !f.symmetric {
        return Err(Error::InvalidScheme(
            "asymmetric weights cannot use the high-nibble path".into(),
        ));
    }
    if f.bits != 4 || f.granularity != Granularity::PerChannel {
        return Err(Error::InvalidScheme(format!(
            "expected 4-bit per-channel weights, got {}-bit {}",
            f.bits, f.granularity
        )));
    }
    Ok(())
}

fn check_inner(a_cols: usize, w_cols: usize) -> Result<()> {
    if a_cols != w_cols {
        return Err(shape_err(format!(
            "activations have {a_cols} features, weights have {w_cols}"
        )));
    }
    Ok(())
}

fn i8_codes(a_q: &QuantizedTensor) -> &[i8] {
    match a_q.payload() {
        Payload::I8(v) => v,
        Payload::I4(_) => unreachable!("8-bit tensors always use i8 payloads"),
    }
}

fn packed_codes(w_q: &QuantizedTensor) -> &PackedInt4Buffer {
    match w_q.payload() {
        Payload::I4(b) => b,
        Payload::I8(_) => unreachable!("4-bit tensors always use packed payloads"),
    }
}

/// Weight rows per conversion block of the fast path.
const FAST_BLOCK: usize = 16;

/// `q·16` lanes of elements `start..start + len`.
fn high_nibble_lanes(w: &PackedInt4Buffer, start: usize, len: usize, dst: &mut Vec<i8>) {
    dst.clear();
    if start % 2 == 0 && len % 2 == 0 {
        dst.resize(len, 0);
        for (pair, &b) in dst.chunks_exact_mut(2).zip(&w.bytes()[start / 2..(start + len) / 2]) {
            pair[0] = (b << 4) as i8;
            pair[1] = (b & 0xF0) as i8;
        }
    } else {
        dst.extend((start..start + len).map(|i| w.high_nibble_lane(i)));
    }
}

/// Shifted fast-path accumulators, row-major `(M, N)`. Each block of weight
/// rows is converted once and reused for every activation row.
fn fast_accumulate(a: &[i8], w: &PackedInt4Buffer, m: usize, n: usize, k: usize) -> Vec<i32> {
    let mut out = vec![0i32; m * n];
    if n == 0 || k == 0 {
        return out;
    }
    let tiles: Vec<(usize, Vec<i32>)> = (0..n.div_ceil(FAST_BLOCK))
        .into_par_iter()
        .map(|b| {
            let j0 = b * FAST_BLOCK;
            let jb = FAST_BLOCK.min(n - j0);
            let mut lanes = Vec::with_capacity(jb * k);
            high_nibble_lanes(w, j0 * k, jb * k, &mut lanes);
            let mut tile = Vec::with_capacity(m * jb);
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                tile.extend(lanes.chunks_exact(k).map(|l| int8_dot(a_row, l) >> 4));
            }
            (j0, tile)
        })
        .collect();
    for (j0, tile) in tiles {
        let jb = tile.len() / m.max(1);
        for i in 0..m {
            out[i * n + j0..i * n + j0 + jb].copy_from_slice(&tile[i * jb..(i + 1) * jb]);
        }
    }
    out
}

/// Sign-extended dot product over weight columns `start..end` of row `j`.
#[inline]
fn sign_extend_dot(a_seg: &[i8], w: &PackedInt4Buffer, j: usize, k: usize, start: usize) -> i32 {
    let mut acc = 0i32;
    let base = j * k + start;
    if base % 2 == 0 && a_seg.len() % 2 == 0 {
        let bytes = &w.bytes()[base / 2..(base + a_seg.len()) / 2];
        for (pair, &b) in a_seg.chunks_exact(2).zip(bytes) {
            let lo = ((b << 4) as i8 >> 4) as i32;
            let hi = ((b as i8) >> 4) as i32;
            acc += pair[0] as i32 * lo + pair[1] as i32 * hi;
        }
    } else {
        for (c, &a) in a_seg.iter().enumerate() {
            acc += a as i32 * w.signed(base + c) as i32;
        }
    }
    acc
}

/// Integer accumulators of the fast path (after the shift), row-major `(M, N)`.
pub fn fast_int_accumulators(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<Vec<i32>> {
    check_activation(a_q)?;
    check_fast_weight(w_q)?;
    check_inner(a_q.cols(), w_q.cols())?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w_q.rows());
    Ok(fast_accumulate(i8_codes(a_q), packed_codes(w_q), m, n, k))
}

/// Fused W4A8 GEMM: signed nibbles land in the high half of an INT8 lane
/// (`q·16`), INT8 MACs accumulate into 32 bits, one arithmetic shift right by
/// 4 restores the exact sum, and one dequantization by `S_a[i]·S_w[j]`
/// produces the output.
pub fn gemm_w4a8_fast(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<GemmOutput> {
    check_activation(a_q)?;
    check_fast_weight(w_q)?;
    check_inner(a_q.cols(), w_q.cols())?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w_q.rows());
    if k > FAST_MAX_K {
        return Err(shape_err(format!("K = {k} exceeds {FAST_MAX_K}")));
    }
    let acc = fast_accumulate(i8_codes(a_q), packed_codes(w_q), m, n, k);
    let (sa, sw) = (a_q.scales(), w_q.scales());
    let out: Vec<f32> = acc
        .iter()
        .enumerate()
        .map(|(idx, &v)| v as f32 * (sa[idx / n] * sw[idx % n]))
        .collect();
    let mn = (m * n) as u64;
    Ok(GemmOutput {
        output: DenseTensor::new(m, n, out)?,
        counters: GemmCounters {
            int8_mac_ops: mn * k as u64,
            dequant_events: mn,
            zero_point_sub_ops: 0,
            final_scale_ops: mn,
        },
    })
}

/// Integer accumulators of the asymmetric path, row-major `(M, N)`.
pub fn asymmetric_int_accumulators(
    a_q: &QuantizedTensor,
    w: &OffsetPackedWeights,
) -> Result<Vec<i32>> {
    let (acc, _) = asymmetric_core(a_q, w)?;
    Ok(acc)
}

fn asymmetric_core(a_q: &QuantizedTensor, w: &OffsetPackedWeights) -> Result<(Vec<i32>, u64)> {
    check_activation(a_q)?;
    check_inner(a_q.cols(), w.cols)?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w.rows);
    let a = i8_codes(a_q);
    // one sweep per output column: unpack the weight row once, widening to
    // 32 bits before the zero point can be subtracted
    let columns: Vec<(Vec<i32>, u64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let zp = w.zero_points[j];
            let widened: Vec<i32> = (0..k)
                .map(|c| w.packed.nibble(j * k + c) as i32 - zp)
                .collect();
            let col = (0..m)
                .map(|i| {
                    a[i * k..(i + 1) * k]
                        .iter()
                        .zip(&widened)
                        .map(|(&x, &y)| x as i32 * y)
                        .sum::<i32>()
                })
                .collect();
            (col, k as u64)
        })
        .collect();
    let mut acc = vec![0i32; m * n];
    let mut subs = 0u64;
    for (j, (col, s)) in columns.into_iter().enumerate() {
        subs += s;
        for (i, v) in col.into_iter().enumerate() {
            acc[i * n + j] = v;
        }
    }
    Ok((acc, subs))
}

/// Vanilla W4A8 with offset-encoded weights: unsigned nibbles are widened to
/// INT32 and the zero point subtracted before the MAC.
pub fn gemm_w4a8_asymmetric(a_q: &QuantizedTensor, w: &OffsetPackedWeights) -> Result<GemmOutput> {
    let (acc, subs) = asymmetric_core(a_q, w)?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w.rows);
    let sa = a_q.scales();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = acc[i * n + j] as f32 * (sa[i] * w.scales[j]);
        }
    }
    let mn = (m * n) as u64;
    Ok(GemmOutput {
        output: DenseTensor::new(m, n, out)?,
        counters: GemmCounters {
            int8_mac_ops: mn * k as u64,
            dequant_events: mn,
            zero_point_sub_ops: subs,
            final_scale_ops: mn,
        },
    })
}

/// Fine-grained W4A8: INT8 MAC sub-sums per group, each dequantized by
/// `S_a[i]·S[j][g]` into a real accumulator.
pub fn gemm_w4a8_finegrained(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<GemmOutput> {
    check_activation(a_q)?;
    let f = w_q.format();
    let g = match (f.bits, f.symmetric, f.granularity) {
        (4, true, Granularity::PerGroup(g)) => g,
        _ => {
            return Err(Error::InvalidScheme(format!(
                "expected symmetric 4-bit per-group weights, got {}-bit {}",
                f.bits, f.granularity
            )))
        }
    };
    check_inner(a_q.cols(), w_q.cols())?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w_q.rows());
    if k % g != 0 {
        return Err(Error::InvalidScheme(format!(
            "group size {g} does not divide K = {k}"
        )));
    }
    let groups = k / g;
    let a = i8_codes(a_q);
    let w = packed_codes(w_q);
    let (sa, sw) = (a_q.scales(), w_q.scales());
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for gi in 0..groups {
                    let start = gi * g;
                    let isum = sign_extend_dot(&a_row[start..start + g], w, j, k, start);
                    acc += isum as f32 * (sa[i] * sw[j * groups + gi]);
                }
                *o = acc;
            }
        });
    }
    let mn = (m * n) as u64;
    Ok(GemmOutput {
        output: DenseTensor::new(m, n, out)?,
        counters: GemmCounters {
            int8_mac_ops: mn * k as u64,
            dequant_events: mn * groups as u64,
            zero_point_sub_ops: 0,
            final_scale_ops: 0,
        },
    })
}

/// W4A16: real activations times weights dequantized on the fly, group by
/// group. Accumulates in a single f32 per output element in `k` order, so it
/// equals `matmul_f32(a, dequantize(w_q))` bit for bit.
pub fn gemm_w4a16_grouped(a: &DenseTensor, w_q: &QuantizedTensor) -> Result<GemmOutput> {
    let f = w_q.format();
    let g = match (f.bits, f.symmetric, f.granularity) {
        (4, true, Granularity::PerGroup(g)) => g,
        (4, true, Granularity::PerChannel) => w_q.cols().max(1),
        _ => {
            return Err(Error::InvalidScheme(format!(
                "expected symmetric 4-bit grouped weights, got {}-bit {}",
                f.bits, f.granularity
            )))
        }
    };
    check_inner(a.cols(), w_q.cols())?;
    let (m, k, n) = (a.rows(), a.cols(), w_q.rows());
    let groups = k / g;
    let w = packed_codes(w_q);
    let sw = w_q.scales();
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let a_row = a.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for gi in 0..groups {
                    let s = sw[j * groups + gi];
                    let base = j * k + gi * g;
                    for (c, &x) in a_row[gi * g..(gi + 1) * g].iter().enumerate() {
                        acc += x * (w.signed(base + c) as f32 * s);
                    }
                }
                *o = acc;
            }
        });
    }
    Ok(GemmOutput {
        output: DenseTensor::new(m, n, out)?,
        counters: GemmCounters {
            int8_mac_ops: 0,
            dequant_events: (m * n * k) as u64,
            zero_point_sub_ops: 0,
            final_scale_ops: 0,
        },
    })
}

/// Integer accumulators of the W8A8 path, row-major `(M, N)`.
pub fn w8a8_int_accumulators(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<Vec<i32>> {
    check_w8a8(a_q, w_q)?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w_q.rows());
    let a = i8_codes(a_q);
    let w = i8_codes(w_q);
    let mut out = vec![0i32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                *o = int8_dot(a_row, &w[j * k..(j + 1) * k]);
            }
        });
    }
    Ok(out)
}

#[inline]
fn int8_dot(a: &[i8], w: &[i8]) -> i32 {
    a.iter().zip(w).map(|(&x, &y)| x as i32 * y as i32).sum()
}

fn check_w8a8(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<()> {
    check_activation(a_q)?;
    let f = w_q.format();
    if f.bits != 8 || !f.symmetric || f.granularity != Granularity::PerChannel {
        return Err(Error::InvalidScheme(format!(
            "expected symmetric 8-bit per-channel weights, got {}-bit {}",
            f.bits, f.granularity
        )));
    }
    check_inner(a_q.cols(), w_q.cols())?;
    if a_q.cols() > W8A8_MAX_K {
        return Err(shape_err(format!("K = {} exceeds {W8A8_MAX_K}", a_q.cols())));
    }
    Ok(())
}

/// W8A8: INT8 MAC into 32 bits, one dequantization per output element.
pub fn gemm_w8a8(a_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<GemmOutput> {
    check_w8a8(a_q, w_q)?;
    let (m, k, n) = (a_q.rows(), a_q.cols(), w_q.rows());
    let a = i8_codes(a_q);
    let w = i8_codes(w_q);
    let (sa, sw) = (a_q.scales(), w_q.scales());
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let acc = int8_dot(a_row, &w[j * k..(j + 1) * k]);
                *o = acc as f32 * (sa[i] * sw[j]);
            }
        });
    }
    let mn = (m * n) as u64;
    Ok(GemmOutput {
        output: DenseTensor::new(m, n, out)?,
        counters: GemmCounters {
            int8_mac_ops: mn * k as u64,
            dequant_events: mn,
            zero_point_sub_ops: 0,
            final_scale_ops: mn,
        },
    })
}

/// Re-labels symmetric per-channel 4-bit weights as 8-bit codes (same values,
/// unpacked), for W8A8 cross-checks.
pub fn widen_to_int8(w_q: &QuantizedTensor) -> Result<QuantizedTensor> {
    check_fast_weight(w_q)?;
    let mut f = w_q.format();
    f.bits = 8;
    QuantizedTensor::new(
        w_q.rows(),
        w_q.cols(),
        f,
        Payload::I8(w_q.codes()),
        w_q.scales().to_vec(),
        None,
    )
}

/// Re-labels per-channel weights as per-group with the channel scale repeated
/// for each of the `cols / g` groups.
pub fn broadcast_to_groups(w_q: &QuantizedTensor, g: usize) -> Result<QuantizedTensor> {
    check_fast_weight(w_q)?;
    let cols = w_q.cols();
    if g == 0 || cols % g != 0 {
        return Err(Error::InvalidScheme(format!(
            "group size {g} does not divide K = {cols}"
        )));
    }
    let groups = cols / g;
    let scales = w_q
        .scales()
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, groups))
        .collect();
    let mut f = w_q.format();
    f.granularity = Granularity::PerGroup(g);
    QuantizedTensor::new(w_q.rows(), cols, f, w_q.payload().clone(), scales, None)
}

/// `max|x - y| / max|y|` (the denominator floored at the smallest normal f32).
pub fn max_relative_error(x: &[f32], y: &[f32]) -> f64 {
    let num = x
        .iter()
        .zip(y)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    let den = y
        .iter()
        .map(|v| (*v as f64).abs())
        .fold(f32::MIN_POSITIVE as f64, f64::max);
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_activations_per_token, quantize_weights, QuantFormat, QuantScheme};
    use crate::tensor::matmul_f32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(codes: Vec<i8>, rows: usize, cols: usize, scales: Vec<f32>) -> QuantizedTensor {
        let f = QuantFormat::new(8, true, Granularity::PerToken).unwrap();
        QuantizedTensor::from_codes(rows, cols, f, codes, scales, None).unwrap()
    }

    fn w4(codes: Vec<i8>, rows: usize, cols: usize, scales: Vec<f32>, gran: Granularity) -> QuantizedTensor {
        let f = QuantFormat::new(4, true, gran).unwrap();
        QuantizedTensor::from_codes(rows, cols, f, codes, scales, None).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> (QuantizedTensor, QuantizedTensor) {
        let a = act(
            (0..m * k).map(|_| rng.random_range(-127..=127)).collect(),
            m,
            k,
            (0..m).map(|_| rng.random_range(0.001..0.1)).collect(),
        );
        let w = w4(
            (0..n * k).map(|_| rng.random_range(-8..=7)).collect(),
            n,
            k,
            (0..n).map(|_| rng.random_range(0.001..0.1)).collect(),
            Granularity::PerChannel,
        );
        (a, w)
    }

    // independent oracle: explicit two's-complement sign extension
    fn oracle(a: &QuantizedTensor, w: &QuantizedTensor) -> Vec<i32> {
        let (m, k, n) = (a.rows(), a.cols(), w.rows());
        let ac = a.codes();
        let wc: Vec<i32> = match w.payload() {
            Payload::I4(b) => (0..b.len())
                .map(|i| {
                    let nib = b.nibble(i) as i32;
                    if nib >= 8 { nib - 16 } else { nib }
                })
                .collect(),
            Payload::I8(v) => v.iter().map(|&x| x as i32).collect(),
        };
        let mut out = vec![0; m * n];
        for i in 0..m {
            for j in 0..n {
                for c in 0..k {
                    out[i * n + j] += ac[i * k + c] as i32 * wc[j * k + c];
                }
            }
        }
        out
    }

    #[test]
    fn fast_hand_example() {
        let a = act(vec![3, -2], 1, 2, vec![0.02]);
        let w = w4(vec![-7, 5], 1, 2, vec![0.005], Granularity::PerChannel);
        let lanes = crate::pack::unpack_sint4_high_nibble(packed_codes(&w));
        assert_eq!(lanes, vec![-112, 80]);
        assert_eq!(3 * -112 + -2 * 80, -496);
        assert_eq!(fast_int_accumulators(&a, &w).unwrap(), vec![-31]);
        let out = gemm_w4a8_fast(&a, &w).unwrap();
        assert_eq!(out.output.data(), &[-31.0 * (0.02f32 * 0.005)]);
        assert!((0.02f32 * 0.005 - 1e-4).abs() < 1e-10);
        assert_eq!(out.counters.dequant_events, 1);
        assert_eq!(out.counters.zero_point_sub_ops, 0);
    }

    #[test]
    fn asymmetric_one_by_one() {
        let a = act(vec![3], 1, 1, vec![1.0]);
        let w = w4(vec![-7], 1, 1, vec![1.0], Granularity::PerChannel);
        let off = OffsetPackedWeights::from_quantized(&w).unwrap();
        assert_eq!(off.packed().nibble(0), 1);
        assert_eq!(asymmetric_int_accumulators(&a, &off).unwrap(), vec![-21]);
        let out = gemm_w4a8_asymmetric(&a, &off).unwrap();
        assert_eq!(out.output.data(), &[-21.0]);
        assert_eq!(out.counters.zero_point_sub_ops, 1);
    }

    #[test]
    fn exhaustive_scalar_pairs() {
        for wv in -8i8..=7 {
            for av in i8::MIN..=i8::MAX {
                let a = act(vec![av], 1, 1, vec![1.0]);
                let w = w4(vec![wv], 1, 1, vec![1.0], Granularity::PerChannel);
                assert_eq!(
                    fast_int_accumulators(&a, &w).unwrap(),
                    vec![av as i32 * wv as i32]
                );
            }
        }
    }

    #[test]
    fn fast_matches_oracle_odd_and_even_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, n, k) in &[(3, 5, 7), (4, 4, 16), (1, 9, 33), (2, 3, 1)] {
            let (a, w) = random_case(&mut rng, m, n, k);
            assert_eq!(fast_int_accumulators(&a, &w).unwrap(), oracle(&a, &w));
        }
    }

    #[test]
    fn engines_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, w) = random_case(&mut rng, 5, 6, 24);
        let fast = gemm_w4a8_fast(&a, &w).unwrap().output;
        let off = OffsetPackedWeights::from_quantized(&w).unwrap();
        let asym = gemm_w4a8_asymmetric(&a, &off).unwrap().output;
        let fine = gemm_w4a8_finegrained(&a, &broadcast_to_groups(&w, 24).unwrap()).unwrap().output;
        let w8 = gemm_w8a8(&a, &widen_to_int8(&w).unwrap()).unwrap().output;
        assert_eq!(fast, asym);
        assert_eq!(fast, fine);
        assert_eq!(fast, w8);
        let fine8 = gemm_w4a8_finegrained(&a, &broadcast_to_groups(&w, 8).unwrap()).unwrap().output;
        assert!(max_relative_error(fine8.data(), fast.data()) <= 1e-5);
    }

    #[test]
    fn finegrained_against_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n, k, g) = (4, 8, 8, 4);
        let a = act(
            (0..m * k).map(|_| rng.random_range(-127..=127)).collect(),
            m,
            k,
            (0..m).map(|_| rng.random_range(0.01..0.1)).collect(),
        );
        let w = w4(
            (0..n * k).map(|_| rng.random_range(-8..=7)).collect(),
            n,
            k,
            (0..n * k / g).map(|_| rng.random_range(0.01..0.1)).collect(),
            Granularity::PerGroup(g),
        );
        let out = gemm_w4a8_finegrained(&a, &w).unwrap();
        let (ac, wc) = (a.codes(), w.codes());
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for c in 0..k {
                    expect[i * n + j] += ac[i * k + c] as f64
                        * a.scales()[i] as f64
                        * wc[j * k + c] as f64
                        * w.scales()[j * (k / g) + c / g] as f64;
                }
            }
        }
        let expect: Vec<f32> = expect.into_iter().map(|v| v as f32).collect();
        assert!(max_relative_error(out.output.data(), &expect) <= 1e-5);
        assert_eq!(out.counters.dequant_events, (m * n * k / g) as u64);
        assert_eq!(out.counters.int8_mac_ops, (m * n * k) as u64);
    }

    #[test]
    fn w4a16_single_group_equals_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DenseTensor::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let wd = DenseTensor::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        for g in [8, 4, 2] {
            let w = quantize_weights(&wd, &QuantScheme::per_group(4, g).unwrap()).unwrap();
            let out = gemm_w4a16_grouped(&a, &w).unwrap();
            assert_eq!(out.output, matmul_f32(&a, &dequantize(&w)).unwrap());
            assert_eq!(out.counters.dequant_events, 4 * 8 * 8);
        }
    }

    #[test]
    fn w4a16_against_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseTensor::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let wd = DenseTensor::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let w = quantize_weights(&wd, &QuantScheme::per_group(4, 4).unwrap()).unwrap();
        let out = gemm_w4a16_grouped(&a, &w).unwrap().output;
        let wc = w.codes();
        let mut expect = vec![0.0f32; 32];
        for i in 0..4 {
            for j in 0..8 {
                let mut s = 0.0f64;
                for c in 0..8 {
                    s += a.get(i, c) as f64 * wc[j * 8 + c] as f64 * w.scales()[j * 2 + c / 4] as f64;
                }
                expect[i * 8 + j] = s as f32;
            }
        }
        assert!(max_relative_error(out.data(), &expect) <= 1e-5);
    }

    #[test]
    fn w8a8_identity_weights() {
        let a = act(vec![5, -3, 100, 7], 2, 2, vec![0.5, 0.25]);
        let f = QuantFormat::new(8, true, Granularity::PerChannel).unwrap();
        let w = QuantizedTensor::from_codes(2, 2, f, vec![1, 0, 0, 1], vec![1.0, 1.0], None).unwrap();
        let out = gemm_w8a8(&a, &w).unwrap().output;
        assert_eq!(out.data(), &[2.5, -1.5, 25.0, 1.75]);
    }

    #[test]
    fn w8a8_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = act((0..6 * 20).map(|_| rng.random()).collect(), 6, 20, vec![1.0; 6]);
        let f = QuantFormat::new(8, true, Granularity::PerChannel).unwrap();
        let w = QuantizedTensor::from_codes(7, 20, f, (0..7 * 20).map(|_| rng.random()).collect(), vec![1.0; 7], None).unwrap();
        assert_eq!(w8a8_int_accumulators(&a, &w).unwrap(), oracle(&a, &w));
    }

    #[test]
    fn accumulator_bounds() {
        assert!(127i64 * 127 * W8A8_MAX_K as i64 <= i32::MAX as i64);
        assert!(128i64 * 127 * FAST_MAX_K as i64 <= i32::MAX as i64);
    }

    #[test]
    fn scheme_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, w) = random_case(&mut rng, 2, 2, 4);
        let wd = DenseTensor::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let asym = quantize_weights(&wd, &QuantScheme::new(4, false, Granularity::PerChannel).unwrap()).unwrap();
        assert!(matches!(gemm_w4a8_fast(&a, &asym), Err(Error::InvalidScheme(_))));
        let (a3, _) = random_case(&mut rng, 2, 2, 3);
        assert!(matches!(gemm_w4a8_fast(&a3, &w), Err(Error::Shape(_))));
        assert!(gemm_w4a8_finegrained(&a, &w).is_err());
        assert!(broadcast_to_groups(&w, 3).is_err());
        let real = DenseTensor::zeros(2, 4);
        let act_as_weight = quantize_activations_per_token(&real, 8).unwrap();
        assert!(gemm_w8a8(&a, &act_as_weight).is_err());
    }

    #[test]
    fn thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, w) = random_case(&mut rng, 17, 13, 64);
        let wg = broadcast_to_groups(&w, 16).unwrap();
        let run = || {
            (
                gemm_w4a8_fast(&a, &w).unwrap(),
                gemm_w4a8_finegrained(&a, &wg).unwrap(),
            )
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let many = rayon::ThreadPoolBuilder::new().num_threads(5).build().unwrap().install(run);
        assert_eq!(one, many);
    }
}
