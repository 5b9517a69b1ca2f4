//! The ZSLT tensor container.
//!
//! Byte layout, all little-endian:
//!
//! ```text
//! offset 0   magic   b"ZSLT"
//! offset 4   version u16 (currently 1)
//! offset 6   dtype   u16 (1 = f32, 2 = f64)
//! offset 8   rank    u16
//! offset 10  dims    rank × u64
//! then       payload row-major, 4 or 8 bytes per element
//! ```
//!
//! Malformed input of any kind is a `Format` error carrying the byte offset;
//! the decoder never allocates more than the input's own length.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ZSLT";
pub const VERSION: u16 = 1;

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Serializes a tensor into the container format.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + t.rank() * 8 + t.numel() * T::BYTE_WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes one tensor from a byte buffer, checking every structural invariant.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(format_err(
                bytes.len() as u64,
                format!("truncated while reading {what} (need {} bytes)", offset + len),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[0..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"ZSLT\""));
    }
    need(4, 2, "version")?;
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version == 0 || version > VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    need(6, 2, "dtype")?;
    let dtype = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
    if dtype != 1 && dtype != 2 {
        return Err(format_err(6, format!("unknown dtype code {dtype}")));
    }
    if dtype != T::DTYPE_CODE {
        return Err(format_err(
            6,
            format!("dtype mismatch: file holds code {dtype}, expected {}", T::DTYPE_CODE),
        ));
    }
    need(8, 2, "rank")?;
    let rank = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(format_err(8, "rank must be at least 1"));
    }
    need(10, rank * 8, "dims")?;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let off = 10 + i * 8;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if d == 0 {
            return Err(format_err(off as u64, "zero dimension"));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| format_err(off as u64, "dimension product overflows"))?;
        shape.push(d as usize);
    }
    let payload_off = 10 + rank * 8;
    let payload = &bytes[payload_off..];
    let expect_bytes = (numel as usize)
        .checked_mul(T::BYTE_WIDTH)
        .ok_or_else(|| format_err(payload_off as u64, "payload size overflows"))?;
    if payload.len() != expect_bytes {
        return Err(format_err(
            payload_off as u64,
            format!(
                "dims promise {numel} elements ({expect_bytes} bytes) but payload holds {} bytes ({} elements)",
                payload.len(),
                payload.len() / T::BYTE_WIDTH
            ),
        ));
    }
    let data: Vec<T> = payload
        .chunks_exact(T::BYTE_WIDTH)
        .map(|c| T::read_le(c))
        .collect();
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(format_err(
                (payload_off + i * T::BYTE_WIDTH) as u64,
                "non-finite payload value",
            ));
        }
    }
    Ok(Tensor::from_vec_unchecked(shape, data))
}

pub fn save_tensor_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Data(format!("cannot read tensor file {}: {e}", path.display()))
    })?;
    decode_tensor(&bytes)
}
