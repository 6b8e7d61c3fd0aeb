//! TSR1 binary tensor format.
//!
//! Little-endian layout:
//!
//! | bytes            | content                         |
//! |------------------|---------------------------------|
//! | 4                | magic `TSR1`                    |
//! | 4                | `u32` rank `r`                  |
//! | 8 * r            | `u64` extents, outermost first  |
//! | 8 * prod(extent) | `f64` payload, row-major        |
//!
//! Trailing bytes after the payload are rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSR1";

/// Largest rank accepted by the decoder.
pub const MAX_RANK: usize = 16;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(TensorError::Format(format!(
            "truncated: need {n} bytes, have {}",
            buf.len()
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut buf = bytes;
    if take(&mut buf, 4)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let rank = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap());
        let e = usize::try_from(e).map_err(|_| TensorError::Format("extent overflow".into()))?;
        count = count
            .checked_mul(e)
            .ok_or_else(|| TensorError::Format("element count overflow".into()))?;
        shape.push(e);
    }
    let payload = count
        .checked_mul(8)
        .ok_or_else(|| TensorError::Format("payload size overflow".into()))?;
    if buf.len() != payload {
        return Err(TensorError::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {payload}",
            buf.len()
        )));
    }
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
