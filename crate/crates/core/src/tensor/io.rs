//! Flat binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4   magic "FGT1"
//! bytes 4..8   rank as u32
//! then         rank dimensions, u32 each
//! then         row-major f32 payload, product(dims) elements
//! ```
//!
//! A rank of zero is a scalar with a one-element payload. Round-trips are
//! exact: the payload is the raw bit pattern of each `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FGT_MAGIC: &[u8; 4] = b"FGT1";

const MAX_RANK: u32 = 8;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + tensor.rank() * 4 + tensor.numel() * 4);
    bytes.extend_from_slice(FGT_MAGIC);
    bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for dim in tensor.shape() {
        bytes.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for value in tensor.data() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: String| Error::format(path, detail);

    if bytes.len() < 8 {
        return Err(fail(format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[0..4] != FGT_MAGIC {
        return Err(fail(format!("bad magic {:?}, expected \"FGT1\"", &bytes[0..4])));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank > MAX_RANK {
        return Err(fail(format!("rank {rank} exceeds the supported maximum {MAX_RANK}")));
    }
    let rank = rank as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(fail(format!("truncated header: rank {rank} needs {header} bytes")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let off = 8 + i * 4;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        numel = numel.checked_mul(dim).ok_or_else(|| {
            Error::format(path, format!("dimension product overflows: {shape:?} x {dim}"))
        })?;
        shape.push(dim);
    }
    let expected = header + numel * 4;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload mismatch: shape {shape:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}
