//! INT4 nibble packing.
//!
//! Two 4-bit values per byte: element `2k` lives in the low nibble of byte
//! `k`, element `2k + 1` in the high nibble. An odd trailing element leaves the
//! last high nibble zero.
//!
//! Two encodings share the container:
//!
//! * **signed** (`pack_sint4_high_nibble`): the low four two's-complement bits
//!   of each code. Moving a nibble into the top half of an `i8` lane yields
//!   `code * 16` with the sign already in place, so no subtraction is needed.
//! * **offset** (`pack_uint4_offset`): `code + 8` as an unsigned nibble. The
//!   consumer has to subtract 8 again, which on integer hardware means widening
//!   first.

use crate::error::{Error, Result};

pub const INT4_MIN: i8 = -8;
pub const INT4_MAX: i8 = 7;
/// Offset used by the unsigned encoding.
pub const UINT4_ZERO_POINT: i32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedInt4Buffer {
    bytes: Vec<u8>,
    len: usize,
}

impl PackedInt4Buffer {
    /// Wraps raw bytes; the byte count must be `ceil(len / 2)`.
    pub fn from_raw(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(2) {
            return Err(Error::Shape(format!(
                "{} bytes cannot hold exactly {len} nibbles",
                bytes.len()
            )));
        }
        Ok(Self { bytes, len })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Raw 4-bit field of element `i`, in `0..16`.
    #[inline(always)]
    pub fn nibble(&self, i: usize) -> u8 {
        let b = self.bytes[i >> 1];
        if i & 1 == 0 {
            b & 0x0F
        } else {
            b >> 4
        }
    }

    /// Element `i` of a signed buffer placed in the high half of an `i8`,
    /// i.e. `code * 16`.
    #[inline(always)]
    pub fn high_nibble_lane(&self, i: usize) -> i8 {
        let b = self.bytes[i >> 1];
        if i & 1 == 0 {
            (b << 4) as i8
        } else {
            (b & 0xF0) as i8
        }
    }

    /// Element `i` of a signed buffer, sign-extended.
    #[inline(always)]
    pub fn signed(&self, i: usize) -> i8 {
        self.high_nibble_lane(i) >> 4
    }

    /// Flips every bit of one stored nibble. Used to inject faults in
    /// verification runs.
    pub fn flip_nibble(&mut self, i: usize) {
        let mask = if i & 1 == 0 { 0x0F } else { 0xF0 };
        self.bytes[i >> 1] ^= mask;
    }
}

fn check_int4(q: &[i8]) -> Result<()> {
    match q.iter().position(|v| !(INT4_MIN..=INT4_MAX).contains(v)) {
        Some(index) => Err(Error::OutOfRange {
            index,
            value: q[index] as i32,
            min: INT4_MIN as i32,
            max: INT4_MAX as i32,
        }),
        None => Ok(()),
    }
}

fn pack_nibbles(q: &[i8], encode: impl Fn(i8) -> u8) -> PackedInt4Buffer {
    let bytes = q
        .chunks(2)
        .map(|pair| {
            let lo = encode(pair[0]);
            let hi = pair.get(1).map_or(0, |&v| encode(v));
            lo | (hi << 4)
        })
        .collect();
    PackedInt4Buffer { bytes, len: q.len() }
}

/// Packs signed codes as their low four two's-complement bits.
pub fn pack_sint4_high_nibble(q: &[i8]) -> Result<PackedInt4Buffer> {
    check_int4(q)?;
    Ok(pack_nibbles(q, |v| (v as u8) & 0x0F))
}

/// Every element as `code * 16` in an `i8` lane.
pub fn unpack_sint4_high_nibble(buf: &PackedInt4Buffer) -> Vec<i8> {
    (0..buf.len()).map(|i| buf.high_nibble_lane(i)).collect()
}

/// Every element sign-extended back to its code.
pub fn unpack_sint4(buf: &PackedInt4Buffer) -> Vec<i8> {
    (0..buf.len()).map(|i| buf.signed(i)).collect()
}

/// Packs signed codes as `code + 8` unsigned nibbles.
pub fn pack_uint4_offset(q: &[i8]) -> Result<PackedInt4Buffer> {
    check_int4(q)?;
    Ok(pack_nibbles(q, |v| (v as i32 + UINT4_ZERO_POINT) as u8))
}

/// Inverse of [`pack_uint4_offset`]: widen, then subtract 8.
pub fn unpack_uint4_offset(buf: &PackedInt4Buffer) -> Vec<i8> {
    (0..buf.len())
        .map(|i| (buf.nibble(i) as i32 - UINT4_ZERO_POINT) as i8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minus_seven_high_nibble() {
        assert_eq!((-7i8) as u8, 0b1111_1001);
        let buf = pack_sint4_high_nibble(&[-7]).unwrap();
        assert_eq!(buf.bytes(), &[0b0000_1001]);
        assert_eq!(buf.high_nibble_lane(0) as u8, 0b1001_0000);
        assert_eq!(buf.high_nibble_lane(0), -112);
    }

    #[test]
    fn zero_and_minus_eight() {
        let buf = pack_sint4_high_nibble(&[0, -8]).unwrap();
        assert_eq!(buf.bytes(), &[0b1000_0000]);
        assert_eq!(unpack_sint4_high_nibble(&buf), vec![0, -128]);
    }

    #[test]
    fn offset_encoding_examples() {
        let buf = pack_uint4_offset(&[-7, 7]).unwrap();
        assert_eq!(buf.nibble(0), 0b0001);
        assert_eq!(buf.nibble(1), 0b1111);
    }

    #[test]
    fn odd_length_pads_high_nibble() {
        let buf = pack_sint4_high_nibble(&[1, 2, 3, 4, -1]).unwrap();
        assert_eq!(buf.bytes().len(), 3);
        assert_eq!(buf.bytes()[2], 0x0F);
    }

    #[test]
    fn exhaustive_single_values() {
        for v in INT4_MIN..=INT4_MAX {
            let s = pack_sint4_high_nibble(&[v]).unwrap();
            assert_eq!(unpack_sint4(&s), vec![v]);
            assert_eq!(unpack_sint4_high_nibble(&s), vec![v * 16]);
            let u = pack_uint4_offset(&[v]).unwrap();
            assert_eq!(unpack_uint4_offset(&u), vec![v]);
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            pack_sint4_high_nibble(&[0, 8]),
            Err(Error::OutOfRange { index: 1, value: 8, .. })
        ));
        assert!(pack_uint4_offset(&[-9]).is_err());
    }

    #[test]
    fn flip_nibble_touches_one_element() {
        let mut buf = pack_sint4_high_nibble(&[3, -2]).unwrap();
        buf.flip_nibble(1);
        assert_eq!(unpack_sint4(&buf), vec![3, 1]);
    }

    proptest! {
        #[test]
        fn round_trips(v in proptest::collection::vec(-8i8..=7, 0..200)) {
            let s = pack_sint4_high_nibble(&v).unwrap();
            prop_assert_eq!(s.bytes().len(), v.len().div_ceil(2));
            prop_assert_eq!(unpack_sint4(&s), v.clone());
            let u = pack_uint4_offset(&v).unwrap();
            prop_assert_eq!(unpack_uint4_offset(&u), v);
        }
    }
}
