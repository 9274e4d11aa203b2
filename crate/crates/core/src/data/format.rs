//! On-disk dataset layout.
//!
//! Tensor files (`*.t`) start with the magic bytes `TCC1`, then a
//! little-endian `u32` dtype code (1 = `f32`), a `u32` rank and one `u64`
//! per dimension, followed by the row-major little-endian samples. Images
//! are stored `(H, W, 3)`, masks and edge maps `(H, W)`. The `manifest` at
//! the dataset root and the per-sample `meta` files are JSON.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TCC1";
pub const DTYPE_F32: u32 = 1;

/// A tensor read from disk: shape and `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match sample count");
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let bad = |msg: String| Error::format(path, msg);
    let word = |at: usize| -> Result<u32> {
        let b = bytes.get(at..at + 4).ok_or_else(|| bad("truncated header".into()))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing TCC1 magic".into()));
    }
    let dtype = word(4)?;
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {dtype}")));
    }
    let rank = word(8)? as usize;
    if rank > 8 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 12 + 8 * i;
        let b = bytes.get(at..at + 8).ok_or_else(|| bad("truncated header".into()))?;
        dims.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
    }
    let body = &bytes[12 + 8 * rank..];
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| bad("dimension product overflows".into()))?;
    if body.len() != count * 4 {
        return Err(bad(format!("expected {} data bytes for dims {dims:?}, found {}", count * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode_tensor(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn join(root: &Path, parts: &[&str]) -> PathBuf {
    parts.iter().fold(root.to_path_buf(), |p, s| p.join(s))
}
