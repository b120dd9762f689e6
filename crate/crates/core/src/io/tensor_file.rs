//! Single-tensor binary container.
//!
//! Layout, all little-endian: `b"STAN"`, `u16` version (1), `u8` dtype
//! (0 = f32), `u8` rank, `rank × u32` dims, row-major `f32` payload.

use std::path::Path;

use stan_tensor::Tensor;

use super::{read_bytes, write_atomic};
use crate::{Result, StanError};

pub const MAGIC: &[u8; 4] = b"STAN";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = t.rank();
    if rank == 0 || rank > u8::MAX as usize {
        return Err(StanError::Data(format!("cannot encode tensor of rank {rank}")));
    }
    let mut out = Vec::with_capacity(8 + 4 * rank + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| StanError::Data(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed. `what` names the source in errors.
pub fn decode_prefix(bytes: &[u8], what: &str) -> Result<(Tensor<f32>, usize)> {
    let bad = |reason: String| StanError::format(what, reason);
    if bytes.len() < 8 {
        return Err(bad(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {}", bytes[6])));
    }
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(bad("rank 0 is not allowed".into()));
    }
    let mut pos = 8;
    if bytes.len() < pos + 4 * rank {
        return Err(bad("dims truncated".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(bad("zero-sized dimension".into()));
        }
        numel = numel.checked_mul(d).ok_or_else(|| bad("dimension product overflows".into()))?;
        shape.push(d);
        pos += 4;
    }
    let payload = numel.checked_mul(4).ok_or_else(|| bad("payload size overflows".into()))?;
    if bytes.len() - pos < payload {
        return Err(bad(format!(
            "payload truncated: expected {payload} bytes, found {}",
            bytes.len() - pos
        )));
    }
    let data = bytes[pos..pos + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::new(shape, data)?, pos + payload))
}

/// Parses a complete tensor file; trailing bytes are an error.
pub fn decode(bytes: &[u8], what: &str) -> Result<Tensor<f32>> {
    let (t, used) = decode_prefix(bytes, what)?;
    if used != bytes.len() {
        return Err(StanError::format(what, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode(&read_bytes(path)?, &path.display().to_string())
}
