//! Round-to-nearest quantization and dequantization.
//!
//! Symmetric codes are `clamp(round(w / S), -2^(N-1), 2^(N-1) - 1)` with
//! `S = max(|γ·max(w)|, |β·min(w)|) / (2^(N-1) - 1)`. Asymmetric codes use a
//! real offset `z`: `q = clamp(round((x - z) / S))`, `x ≈ q·S + z`. Rounding is
//! half away from zero throughout.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pack::{pack_sint4_high_nibble, PackedInt4Buffer};
use crate::tensor::DenseTensor;

/// Scale used for an all-zero channel, group or token (2^-24).
pub const MIN_SCALE: f32 = 1.0 / 16_777_216.0;

/// Default group size for per-group schemes.
pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    /// One scale per weight row (output channel).
    PerChannel,
    /// One scale per activation row (token).
    PerToken,
    /// One scale per run of `g` consecutive elements within a row.
    PerGroup(usize),
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per-tensor",
            Granularity::PerChannel => "per-channel",
            Granularity::PerToken => "per-token",
            Granularity::PerGroup(_) => "per-group",
        }
    }

    pub fn group_size(&self) -> Option<usize> {
        match self {
            Granularity::PerGroup(g) => Some(*g),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerGroup(g) => write!(f, "per-group({g})"),
            other => f.write_str(other.name()),
        }
    }
}

/// The storage-relevant part of a scheme: everything needed to interpret a
/// quantized payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantFormat {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl QuantFormat {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        check_bits(bits)?;
        if granularity == Granularity::PerGroup(0) {
            return Err(Error::InvalidScheme("group size must be positive".into()));
        }
        Ok(Self {
            bits,
            symmetric,
            granularity,
        })
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    /// Number of scales per row for a row length of `cols`.
    pub fn groups_per_row(&self, cols: usize) -> Result<usize> {
        match self.granularity {
            Granularity::PerGroup(g) => {
                if g == 0 || cols % g != 0 {
                    Err(Error::InvalidScheme(format!(
                        "group size {g} does not divide row length {cols}"
                    )))
                } else {
                    Ok(cols / g)
                }
            }
            _ => Ok(1),
        }
    }

    /// Total scale count for a `rows x cols` tensor.
    pub fn scale_count(&self, rows: usize, cols: usize) -> Result<usize> {
        Ok(match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel | Granularity::PerToken => rows,
            Granularity::PerGroup(_) => rows * self.groups_per_row(cols)?,
        })
    }
}

/// Per-channel truncation intensities applied to the weight range before the
/// scale is computed.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ClipFactors {
    /// γ = β = 1 everywhere: plain min-max.
    #[default]
    Identity,
    PerChannel { gamma: Vec<f32>, beta: Vec<f32> },
}

impl ClipFactors {
    pub fn for_row(&self, r: usize) -> (f32, f32) {
        match self {
            ClipFactors::Identity => (1.0, 1.0),
            ClipFactors::PerChannel { gamma, beta } => (gamma[r], beta[r]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub clip: ClipFactors,
}

impl QuantScheme {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        QuantFormat::new(bits, symmetric, granularity)?;
        Ok(Self {
            bits,
            symmetric,
            granularity,
            clip: ClipFactors::Identity,
        })
    }

    /// Symmetric per-channel, the configuration consumed by the fast W4A8 GEMM.
    pub fn per_channel(bits: u8) -> Result<Self> {
        Self::new(bits, true, Granularity::PerChannel)
    }

    pub fn per_group(bits: u8, group_size: usize) -> Result<Self> {
        Self::new(bits, true, Granularity::PerGroup(group_size))
    }

    pub fn with_clip(mut self, gamma: Vec<f32>, beta: Vec<f32>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::InvalidScheme(format!(
                "{} gamma values but {} beta values",
                gamma.len(),
                beta.len()
            )));
        }
        for &f in gamma.iter().chain(&beta) {
            check_clip(f)?;
        }
        self.clip = ClipFactors::PerChannel { gamma, beta };
        Ok(self)
    }

    pub fn format(&self) -> QuantFormat {
        QuantFormat {
            bits: self.bits,
            symmetric: self.symmetric,
            granularity: self.granularity,
        }
    }

    /// Checks the scheme against a `(out_features, in_features)` weight.
    pub fn validate_for_weight(&self, rows: usize, cols: usize) -> Result<()> {
        self.format().groups_per_row(cols)?;
        if let Granularity::PerToken = self.granularity {
            return Err(Error::InvalidScheme(
                "per-token granularity applies to activations, not weights".into(),
            ));
        }
        if let ClipFactors::PerChannel { gamma, .. } = &self.clip {
            if !self.symmetric {
                return Err(Error::InvalidScheme(
                    "weight clipping is only defined for symmetric schemes".into(),
                ));
            }
            if self.granularity == Granularity::PerTensor {
                return Err(Error::InvalidScheme(
                    "per-channel clip factors need a per-row granularity".into(),
                ));
            }
            if gamma.len() != rows {
                return Err(Error::InvalidScheme(format!(
                    "{} clip factors for {rows} channels",
                    gamma.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    I8(Vec<i8>),
    I4(PackedInt4Buffer),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::I8(v) => v.len(),
            Payload::I4(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        match self {
            Payload::I8(v) => v[i],
            Payload::I4(b) => b.signed(i),
        }
    }

    pub fn to_codes(&self) -> Vec<i8> {
        match self {
            Payload::I8(v) => v.clone(),
            Payload::I4(b) => crate::pack::unpack_sint4(b),
        }
    }
}

/// Integer codes plus the scales (and offsets) that map them back to reals.
///
/// 4-bit payloads are always packed two's-complement nibbles; 8-bit payloads
/// are plain `i8`. Scales are row-major `(rows, groups_per_row)` for per-group
/// tensors, one per row for per-channel/per-token, and a single value for
/// per-tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    format: QuantFormat,
    payload: Payload,
    scales: Vec<f32>,
    zero_points: Option<Vec<f32>>,
}

impl QuantizedTensor {
    pub fn new(
        rows: usize,
        cols: usize,
        format: QuantFormat,
        payload: Payload,
        scales: Vec<f32>,
        zero_points: Option<Vec<f32>>,
    ) -> Result<Self> {
        check_bits(format.bits)?;
        if payload.len() != rows * cols {
            return Err(Error::Malformed(format!(
                "payload holds {} codes for a {rows}x{cols} tensor",
                payload.len()
            )));
        }
        match (&payload, format.bits) {
            (Payload::I4(_), 4) | (Payload::I8(_), 8) => {}
            _ => {
                return Err(Error::Malformed(format!(
                    "{}-bit tensor with mismatched payload storage",
                    format.bits
                )))
            }
        }
        if let Payload::I8(v) = &payload {
            // every i8 is in range for 8 bits; nothing to check
            debug_assert!(v.len() == rows * cols);
        }
        let expected = format.scale_count(rows, cols)?;
        if scales.len() != expected {
            return Err(Error::Malformed(format!(
                "{} scales, expected {expected}",
                scales.len()
            )));
        }
        if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Malformed(format!(
                "scale {i} is not strictly positive: {}",
                scales[i]
            )));
        }
        match (&zero_points, format.symmetric) {
            (Some(_), true) => {
                return Err(Error::Malformed(
                    "symmetric tensor carries zero points".into(),
                ))
            }
            (None, false) => {
                return Err(Error::Malformed(
                    "asymmetric tensor without zero points".into(),
                ))
            }
            (Some(z), false) => {
                if z.len() != expected {
                    return Err(Error::Malformed(format!(
                        "{} zero points, expected {expected}",
                        z.len()
                    )));
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Malformed("non-finite zero point".into()));
                }
            }
            (None, true) => {}
        }
        Ok(Self {
            rows,
            cols,
            format,
            payload,
            scales,
            zero_points,
        })
    }

    /// Builds a tensor from unpacked codes, packing them when `format.bits == 4`.
    pub fn from_codes(
        rows: usize,
        cols: usize,
        format: QuantFormat,
        codes: Vec<i8>,
        scales: Vec<f32>,
        zero_points: Option<Vec<f32>>,
    ) -> Result<Self> {
        let payload = match format.bits {
            4 => Payload::I4(pack_sint4_high_nibble(&codes)?),
            _ => Payload::I8(codes),
        };
        Self::new(rows, cols, format, payload, scales, zero_points)
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

    pub fn format(&self) -> QuantFormat {
        self.format
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn payload_mut(&mut self) -> &mut Payload {
        &mut self.payload
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> Option<&[f32]> {
        self.zero_points.as_deref()
    }

    pub fn codes(&self) -> Vec<i8> {
        self.payload.to_codes()
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i8 {
        self.payload.get(r * self.cols + c)
    }

    /// Index into [`scales`](Self::scales) for element `(r, c)`.
    #[inline]
    pub fn scale_index(&self, r: usize, c: usize) -> usize {
        match self.format.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel | Granularity::PerToken => r,
            Granularity::PerGroup(g) => r * (self.cols / g) + c / g,
        }
    }

    pub fn scale_at(&self, r: usize, c: usize) -> f32 {
        self.scales[self.scale_index(r, c)]
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::InvalidScheme(format!(
            "unsupported bit width {bits} (expected 4 or 8)"
        )))
    }
}

fn check_clip(f: f32) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidScheme(format!(
            "clip factor {f} outside (0, 1]"
        )))
    }
}

pub fn qmin(bits: u8) -> i32 {
    -(1 << (bits - 1))
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

fn min_max(w: &[f32]) -> (f32, f32) {
    w.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// `max(|γ·max(w)|, |β·min(w)|) / (2^(N-1) - 1)`, or [`MIN_SCALE`] when that
/// is zero.
pub fn compute_scale_symmetric(w: &[f32], bits: u8, gamma: f32, beta: f32) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::Empty("cannot compute a scale for an empty vector"));
    }
    check_bits(bits)?;
    check_clip(gamma)?;
    check_clip(beta)?;
    let (lo, hi) = min_max(w);
    Ok(symmetric_scale_from_range(lo, hi, bits, gamma, beta))
}

#[inline]
pub(crate) fn symmetric_scale_from_range(lo: f32, hi: f32, bits: u8, gamma: f32, beta: f32) -> f32 {
    let s = (gamma * hi).abs().max((beta * lo).abs()) / qmax(bits) as f32;
    if s.is_normal() {
        s
    } else {
        MIN_SCALE
    }
}

/// `clamp(round(v / scale))` into the signed `bits` range.
#[inline]
pub fn quantize_value(v: f32, scale: f32, bits: u8) -> i8 {
    (v / scale).round().clamp(qmin(bits) as f32, qmax(bits) as f32) as i8
}

pub fn quantize_symmetric(w: &[f32], bits: u8, gamma: f32, beta: f32) -> Result<(Vec<i8>, f32)> {
    let scale = compute_scale_symmetric(w, bits, gamma, beta)?;
    let q = w.iter().map(|&v| quantize_value(v, scale, bits)).collect();
    Ok((q, scale))
}

/// Min-max asymmetric quantization. The range `[min, max]` maps onto the full
/// signed code range; a constant vector gets `z = value`, codes 0 and
/// [`MIN_SCALE`], so it dequantizes exactly.
pub fn quantize_asymmetric(x: &[f32], bits: u8) -> Result<(Vec<i8>, f32, f32)> {
    if x.is_empty() {
        return Err(Error::Empty("cannot quantize an empty vector"));
    }
    check_bits(bits)?;
    let (lo, hi) = min_max(x);
    let (scale, zero) = asymmetric_params(lo, hi, bits);
    let q = x
        .iter()
        .map(|&v| quantize_value(v - zero, scale, bits))
        .collect();
    Ok((q, scale, zero))
}

fn asymmetric_params(lo: f32, hi: f32, bits: u8) -> (f32, f32) {
    let levels = ((1u32 << bits) - 1) as f32;
    let scale = (hi - lo) / levels;
    if hi == lo || !scale.is_normal() {
        (MIN_SCALE, lo)
    } else {
        (scale, lo - qmin(bits) as f32 * scale)
    }
}

/// Quantizes a `(out_features, in_features)` weight under `scheme`.
pub fn quantize_weights(w: &DenseTensor, scheme: &QuantScheme) -> Result<QuantizedTensor> {
    if w.is_empty() {
        return Err(Error::Empty("cannot quantize an empty weight"));
    }
    let (rows, cols) = w.shape();
    scheme.validate_for_weight(rows, cols)?;
    let format = scheme.format();
    let bits = scheme.bits;

    if format.granularity == Granularity::PerTensor {
        let (codes, scale, zero) = if scheme.symmetric {
            let (q, s) = quantize_symmetric(w.data(), bits, 1.0, 1.0)?;
            (q, s, None)
        } else {
            let (q, s, z) = quantize_asymmetric(w.data(), bits)?;
            (q, s, Some(vec![z]))
        };
        return QuantizedTensor::from_codes(rows, cols, format, codes, vec![scale], zero);
    }

    let group = match format.granularity {
        Granularity::PerGroup(g) => g,
        _ => cols,
    };
    let groups = cols / group;

    let per_row: Vec<(Vec<i8>, Vec<f32>, Vec<f32>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let (gamma, beta) = scheme.clip.for_row(r);
            let row = w.row(r);
            let mut codes = Vec::with_capacity(cols);
            let mut scales = Vec::with_capacity(groups);
            let mut zeros = Vec::new();
            for seg in row.chunks(group) {
                let (lo, hi) = min_max(seg);
                if scheme.symmetric {
                    let s = symmetric_scale_from_range(lo, hi, bits, gamma, beta);
                    codes.extend(seg.iter().map(|&v| quantize_value(v, s, bits)));
                    scales.push(s);
                } else {
                    let (s, z) = asymmetric_params(lo, hi, bits);
                    codes.extend(seg.iter().map(|&v| quantize_value(v - z, s, bits)));
                    scales.push(s);
                    zeros.push(z);
                }
            }
            (codes, scales, zeros)
        })
        .collect();

    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * groups);
    let mut zeros = Vec::new();
    for (c, s, z) in per_row {
        codes.extend(c);
        scales.extend(s);
        zeros.extend(z);
    }
    let zeros = (!scheme.symmetric).then_some(zeros);
    QuantizedTensor::from_codes(rows, cols, format, codes, scales, zeros)
}

/// Dynamic symmetric abs-max quantization with one scale per token (row).
pub fn quantize_activations_per_token(a: &DenseTensor, bits: u8) -> Result<QuantizedTensor> {
    if a.is_empty() {
        return Err(Error::Empty("cannot quantize an empty activation"));
    }
    check_bits(bits)?;
    let (rows, cols) = a.shape();
    let format = QuantFormat::new(bits, true, Granularity::PerToken)?;
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = a.row(r);
        let (lo, hi) = min_max(row);
        let s = symmetric_scale_from_range(lo, hi, bits, 1.0, 1.0);
        codes.extend(row.iter().map(|&v| quantize_value(v, s, bits)));
        scales.push(s);
    }
    QuantizedTensor::from_codes(rows, cols, format, codes, scales, None)
}

/// `q·S (+ z)` elementwise, honoring the tensor's granularity.
pub fn dequantize(q: &QuantizedTensor) -> DenseTensor {
    let (rows, cols) = q.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let idx = q.scale_index(r, c);
            let mut v = q.code(r, c) as f32 * q.scales[idx];
            if let Some(z) = &q.zero_points {
                v += z[idx];
            }
            data.push(v);
        }
    }
    DenseTensor::new(rows, cols, data).expect("dequantized values of a valid tensor are finite")
}

/// Reconstruction of a single vector under the symmetric scheme.
pub fn fake_quantize_symmetric(w: &[f32], bits: u8, gamma: f32, beta: f32) -> Result<Vec<f32>> {
    let (q, s) = quantize_symmetric(w, bits, gamma, beta)?;
    Ok(q.into_iter().map(|v| v as f32 * s).collect())
}

impl FromStr for Granularity {
    type Err = Error;

    /// Accepts `per-tensor`, `per-channel`, `per-token`, `per-group` (group
    /// size [`DEFAULT_GROUP_SIZE`]) or `per-group:<g>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor" => Ok(Granularity::PerTensor),
            "per-channel" => Ok(Granularity::PerChannel),
            "per-token" => Ok(Granularity::PerToken),
            "per-group" => Ok(Granularity::PerGroup(DEFAULT_GROUP_SIZE)),
            other => match other.strip_prefix("per-group:").map(str::parse::<usize>) {
                Some(Ok(g)) if g > 0 => Ok(Granularity::PerGroup(g)),
                _ => Err(Error::InvalidScheme(format!("unknown granularity {other:?}"))),
            },
        }
    }
}
