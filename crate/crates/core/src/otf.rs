//! OTF tensor files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "OTF1"            4 bytes
//! dtype  u8                0 = f32, 1 = i8, 2 = packed i4, 3 = i32
//! ndim   u8
//! dims   u64 x ndim
//! payload                  row-major; packed i4 uses two values per byte,
//!                          even index in the low nibble
//! ```
//!
//! A [`QuantizedTensor`] is a directory holding `payload.otf`, `scales.otf`,
//! an optional `zero_points.otf` and a `scheme.txt` of `key=value` lines.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pack::PackedInt4Buffer;
use crate::quant::{Granularity, Payload, QuantFormat, QuantizedTensor};
use crate::tensor::DenseTensor;

pub const MAGIC: [u8; 4] = *b"OTF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    PackedI4 = 2,
    I32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I8),
            2 => Ok(DType::PackedI4),
            3 => Ok(DType::I32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    fn payload_bytes(self, elements: usize) -> usize {
        match self {
            DType::F32 | DType::I32 => elements * 4,
            DType::I8 => elements,
            DType::PackedI4 => elements.div_ceil(2),
        }
    }
}

/// One decoded OTF file.
#[derive(Debug, Clone, PartialEq)]
pub enum OtfTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    I8 { dims: Vec<usize>, data: Vec<i8> },
    PackedI4 { dims: Vec<usize>, data: PackedInt4Buffer },
    I32 { dims: Vec<usize>, data: Vec<i32> },
}

impl OtfTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            OtfTensor::F32 { dims, .. }
            | OtfTensor::I8 { dims, .. }
            | OtfTensor::PackedI4 { dims, .. }
            | OtfTensor::I32 { dims, .. } => dims,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            OtfTensor::F32 { .. } => DType::F32,
            OtfTensor::I8 { .. } => DType::I8,
            OtfTensor::PackedI4 { .. } => DType::PackedI4,
            OtfTensor::I32 { .. } => DType::I32,
        }
    }

    /// Interprets an f32 tensor of rank ≤ 2 as a matrix; rank-1 becomes a
    /// single row.
    pub fn into_dense(self) -> Result<DenseTensor> {
        match self {
            OtfTensor::F32 { dims, data } => {
                let (r, c) = matrix_dims(&dims)?;
                DenseTensor::new(r, c, data)
            }
            other => Err(Error::Malformed(format!(
                "expected an f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

fn matrix_dims(dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        [] => Ok((1, 1)),
        [c] => Ok((1, *c)),
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Malformed(format!(
            "rank-{} tensor cannot be used as a matrix",
            dims.len()
        ))),
    }
}

pub fn encode(t: &OtfTensor) -> Vec<u8> {
    let dims = t.dims();
    let elements: usize = dims.iter().product();
    let mut out = Vec::with_capacity(6 + 8 * dims.len() + t.dtype().payload_bytes(elements));
    out.extend_from_slice(&MAGIC);
    out.push(t.dtype() as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        OtfTensor::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        OtfTensor::I8 { data, .. } => out.extend(data.iter().map(|&v| v as u8)),
        OtfTensor::PackedI4 { data, .. } => out.extend_from_slice(data.bytes()),
        OtfTensor::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<OtfTensor> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Truncated {
                expected: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    need(6)?;
    let dtype = DType::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    need(header)?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 6 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("length checked"));
        dims.push(usize::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} too large")))?);
    }
    let elements = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed("element count overflows".into()))?;
    let payload_len = dtype.payload_bytes(elements);
    let total = header
        .checked_add(payload_len)
        .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    need(total)?;
    if bytes.len() > total {
        return Err(Error::TrailingBytes(bytes.len() - total));
    }
    let p = &bytes[header..total];
    Ok(match dtype {
        DType::F32 => OtfTensor::F32 {
            dims,
            data: p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        },
        DType::I8 => OtfTensor::I8 {
            dims,
            data: p.iter().map(|&b| b as i8).collect(),
        },
        DType::PackedI4 => OtfTensor::PackedI4 {
            dims,
            data: PackedInt4Buffer::from_raw(p.to_vec(), elements)?,
        },
        DType::I32 => OtfTensor::I32 {
            dims,
            data: p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
        },
    })
}

pub fn write_otf(t: &OtfTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_otf(path: impl AsRef<Path>) -> Result<OtfTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn dense_to_otf(t: &DenseTensor) -> OtfTensor {
    OtfTensor::F32 {
        dims: vec![t.rows(), t.cols()],
        data: t.data().to_vec(),
    }
}

pub fn write_dense(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    write_otf(&dense_to_otf(t), path)
}

pub fn read_dense(path: impl AsRef<Path>) -> Result<DenseTensor> {
    read_otf(path)?.into_dense()
}

/// Either kind of tensor this format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Dense(DenseTensor),
    Quantized(QuantizedTensor),
}

/// Writes a dense tensor to a file, or a quantized tensor to a directory.
pub fn write_tensor(t: &StoredTensor, path: impl AsRef<Path>) -> Result<()> {
    match t {
        StoredTensor::Dense(d) => write_dense(d, path),
        StoredTensor::Quantized(q) => write_quantized(q, path),
    }
}

/// Reads a directory as a quantized tensor and a file as a dense one.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    if path.is_dir() {
        read_quantized(path).map(StoredTensor::Quantized)
    } else {
        read_dense(path).map(StoredTensor::Dense)
    }
}

fn scale_dims(format: &QuantFormat, rows: usize, cols: usize) -> Result<Vec<usize>> {
    Ok(match format.granularity {
        Granularity::PerTensor => vec![1],
        Granularity::PerChannel | Granularity::PerToken => vec![rows],
        Granularity::PerGroup(_) => vec![rows, format.groups_per_row(cols)?],
    })
}

pub fn scheme_text(format: &QuantFormat) -> String {
    format!(
        "bits={}\nsymmetric={}\ngranularity={}\ngroup_size={}\n",
        format.bits,
        format.symmetric,
        format.granularity.name(),
        format.granularity.group_size().unwrap_or(0)
    )
}

pub fn parse_scheme_text(text: &str) -> Result<QuantFormat> {
    let mut bits = None;
    let mut symmetric = None;
    let mut granularity = None;
    let mut group_size = 0usize;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Malformed(format!("scheme.txt line {}: expected key=value", n + 1)))?;
        let bad = || Error::Malformed(format!("scheme.txt line {}: bad value {v:?}", n + 1));
        match k.trim() {
            "bits" => bits = Some(v.trim().parse::<u8>().map_err(|_| bad())?),
            "symmetric" => symmetric = Some(v.trim().parse::<bool>().map_err(|_| bad())?),
            "granularity" => granularity = Some(v.trim().to_string()),
            "group_size" => group_size = v.trim().parse().map_err(|_| bad())?,
            _ => {}
        }
    }
    let missing = |k: &str| Error::Malformed(format!("scheme.txt lacks {k}"));
    let granularity = match granularity.ok_or_else(|| missing("granularity"))?.as_str() {
        "per-group" => Granularity::PerGroup(group_size),
        other => other.parse()?,
    };
    QuantFormat::new(
        bits.ok_or_else(|| missing("bits"))?,
        symmetric.ok_or_else(|| missing("symmetric"))?,
        granularity,
    )
}

pub fn write_quantized(q: &QuantizedTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = vec![q.rows(), q.cols()];
    let payload = match q.payload() {
        Payload::I8(v) => OtfTensor::I8 { dims, data: v.clone() },
        Payload::I4(b) => OtfTensor::PackedI4 { dims, data: b.clone() },
    };
    write_otf(&payload, dir.join("payload.otf"))?;
    let sdims = scale_dims(&q.format(), q.rows(), q.cols())?;
    write_otf(
        &OtfTensor::F32 { dims: sdims.clone(), data: q.scales().to_vec() },
        dir.join("scales.otf"),
    )?;
    let zp_path = dir.join("zero_points.otf");
    match q.zero_points() {
        Some(z) => write_otf(&OtfTensor::F32 { dims: sdims, data: z.to_vec() }, &zp_path)?,
        None if zp_path.exists() => fs::remove_file(&zp_path).map_err(|e| Error::io(&zp_path, e))?,
        None => {}
    }
    let scheme_path = dir.join("scheme.txt");
    fs::write(&scheme_path, scheme_text(&q.format())).map_err(|e| Error::io(&scheme_path, e))
}

pub fn read_quantized(dir: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let dir = dir.as_ref();
    let scheme_path = dir.join("scheme.txt");
    let text = fs::read_to_string(&scheme_path).map_err(|e| Error::io(&scheme_path, e))?;
    let format = parse_scheme_text(&text)?;
    let (rows, cols, payload) = match read_otf(dir.join("payload.otf"))? {
        OtfTensor::I8 { dims, data } => {
            let (r, c) = matrix_dims(&dims)?;
            (r, c, Payload::I8(data))
        }
        OtfTensor::PackedI4 { dims, data } => {
            let (r, c) = matrix_dims(&dims)?;
            (r, c, Payload::I4(data))
        }
        other => {
            return Err(Error::Malformed(format!(
                "payload has dtype {:?}",
                other.dtype()
            )))
        }
    };
    let expect_dims = scale_dims(&format, rows, cols)?;
    let f32_vec = |t: OtfTensor, what: &str| -> Result<Vec<f32>> {
        match t {
            OtfTensor::F32 { dims, data } if dims == expect_dims => Ok(data),
            other => Err(Error::Malformed(format!(
                "{what} must be f32 with dims {expect_dims:?}, found {:?} {:?}",
                other.dtype(),
                other.dims()
            ))),
        }
    };
    let scales = f32_vec(read_otf(dir.join("scales.otf"))?, "scales")?;
    let zp_path = dir.join("zero_points.otf");
    let zero_points = if zp_path.exists() {
        Some(f32_vec(read_otf(&zp_path)?, "zero points")?)
    } else {
        None
    };
    QuantizedTensor::new(rows, cols, format, payload, scales, zero_points)
}
