//! Mask dumps.
//!
//! Soft masks (`MSK1`), little-endian:
//!
//! ```text
//! b"MSK1"  u32 count
//! count × { u32 height, u32 width, height·width × f32 probability (row-major) }
//! ```
//!
//! Thresholded masks (`MSKB`) share the header; each mask payload is
//! `ceil(height·width / 8)` bytes, pixel `i` in bit `i % 8` of byte `i / 8`.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const SOFT_MAGIC: &[u8; 4] = b"MSK1";
pub const BINARY_MAGIC: &[u8; 4] = b"MSKB";
/// Probability at or above which a pixel is foreground when thresholding.
pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(fmt_err(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(fmt_err("probability outside [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_f64(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn threshold(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.data.iter().map(|&v| v >= THRESHOLD).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

fn fmt_err(msg: String) -> CoreError {
    CoreError::Format { what: "mask file", msg }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn header(magic: &[u8; 4], count: usize) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out
}

fn dims(r: &mut Reader<'_>, bytes_per: impl Fn(usize) -> usize) -> Result<(usize, usize, usize)> {
    let (h, w) = (r.u32()?, r.u32()?);
    let n = h.checked_mul(w).ok_or_else(|| fmt_err(format!("mask {h}x{w} too large")))?;
    if bytes_per(n) > r.remaining() {
        return Err(fmt_err(format!("truncated {h}x{w} mask")));
    }
    Ok((h, w, n))
}

fn open<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Reader<'a>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(fmt_err(format!("missing magic {:?}", String::from_utf8_lossy(magic))));
    }
    let count = r.u32()?;
    // every mask needs at least its 8-byte dimensions
    if count > r.remaining() / 8 {
        return Err(fmt_err(format!("{count} masks cannot fit in {} bytes", r.remaining())));
    }
    Ok((r, count))
}

fn finish(r: &Reader<'_>) -> Result<()> {
    if r.remaining() != 0 {
        return Err(fmt_err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(())
}

pub fn encode_soft(masks: &[SoftMask]) -> Vec<u8> {
    let mut out = header(SOFT_MAGIC, masks.len());
    for m in masks {
        out.extend_from_slice(&(m.height as u32).to_le_bytes());
        out.extend_from_slice(&(m.width as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_soft(bytes: &[u8]) -> Result<Vec<SoftMask>> {
    let (mut r, count) = open(bytes, SOFT_MAGIC)?;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let (h, w, n) = dims(&mut r, |n| n.saturating_mul(4))?;
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        masks.push(SoftMask::new(h, w, data)?);
    }
    finish(&r)?;
    Ok(masks)
}

pub fn encode_binary(masks: &[BinaryMask]) -> Vec<u8> {
    let mut out = header(BINARY_MAGIC, masks.len());
    for m in masks {
        out.extend_from_slice(&(m.height as u32).to_le_bytes());
        out.extend_from_slice(&(m.width as u32).to_le_bytes());
        let mut packed = vec![0u8; m.bits.len().div_ceil(8)];
        for (i, _) in m.bits.iter().enumerate().filter(|b| *b.1) {
            packed[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&packed);
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<BinaryMask>> {
    let (mut r, count) = open(bytes, BINARY_MAGIC)?;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let (h, w, n) = dims(&mut r, |n| n.div_ceil(8))?;
        let packed = r.take(n.div_ceil(8))?;
        if n % 8 != 0 && packed[n / 8] >> (n % 8) != 0 {
            return Err(fmt_err("padding bits set".into()));
        }
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(BinaryMask { height: h, width: w, bits });
    }
    finish(&r)?;
    Ok(masks)
}

pub fn save_soft(path: impl AsRef<Path>, masks: &[SoftMask]) -> Result<()> {
    Ok(std::fs::write(path, encode_soft(masks))?)
}

pub fn load_soft(path: impl AsRef<Path>) -> Result<Vec<SoftMask>> {
    decode_soft(&std::fs::read(path)?)
}

pub fn save_binary(path: impl AsRef<Path>, masks: &[BinaryMask]) -> Result<()> {
    Ok(std::fs::write(path, encode_binary(masks))?)
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Vec<BinaryMask>> {
    decode_binary(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_layout() {
        let m = SoftMask::new(1, 2, vec![0.25, 1.0]).unwrap();
        let bytes = encode_soft(&[m.clone()]);
        assert_eq!(&bytes[..4], b"MSK1");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8);
        assert_eq!(&bytes[16..20], &0.25f32.to_le_bytes());
        assert_eq!(decode_soft(&bytes).unwrap(), vec![m]);
    }

    #[test]
    fn binary_layout() {
        let m = BinaryMask {
            height: 3,
            width: 3,
            bits: vec![true, false, false, false, false, false, false, false, true],
        };
        let bytes = encode_binary(&[m.clone()]);
        assert_eq!(&bytes[16..], &[0b0000_0001, 0b0000_0001]);
        assert_eq!(decode_binary(&bytes).unwrap(), vec![m]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_soft(b"MSK1").is_err());
        assert!(decode_soft(b"MSK1\x01\0\0\0\xff\xff\xff\xff\xff\xff\xff\xff").is_err());
        assert!(decode_binary(b"MSK1\0\0\0\0").is_err());
        let mut extra = encode_soft(&[]);
        extra.push(0);
        assert!(decode_soft(&extra).is_err());
    }
}
