//! Minimal binary container: magic | u32 LE header length | JSON header |
//! raw payload. Checkpoints and train states both build on this.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub fn write_container(
    path: &Path,
    magic: &[u8],
    header: &serde_json::Value,
    payload: &[u8],
) -> Result<()> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("container header encode: {e}")))?;
    let mut bytes = Vec::with_capacity(magic.len() + 4 + header_json.len() + payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8]) -> Result<(serde_json::Value, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(Error::Format(format!(
            "bad magic in {path:?} (expected {:?})",
            String::from_utf8_lossy(magic)
        )));
    }
    let off = magic.len();
    let hlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let header_end = (off + 4)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corruption(format!("header length runs past file in {path:?}")))?;
    let header = serde_json::from_slice(&bytes[off + 4..header_end])
        .map_err(|e| Error::Format(format!("container header decode: {e}")))?;
    Ok((header, bytes[header_end..].to_vec()))
}

/// Append a tensor's little-endian f32 payload; returns its byte offset.
pub fn push_tensor(payload: &mut Vec<u8>, tensor: &Tensor<f32>) -> u64 {
    let offset = payload.len() as u64;
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

/// Reconstruct a tensor from a container payload slice.
pub fn pull_tensor(payload: &[u8], offset: u64, shape: &[usize]) -> Result<Tensor<f32>> {
    let count: usize = shape.iter().product();
    let start = offset as usize;
    let end = start
        .checked_add(count * 4)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Corruption(format!("tensor at offset {offset} runs past payload")))?;
    let data: Vec<f32> = payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
