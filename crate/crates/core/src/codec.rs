//! Little-endian binary conventions shared by every on-disk artifact.

use std::fs;
use std::path::Path;

use crate::error::{PmceError, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

pub fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn get_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            f64::from_le_bytes(b)
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PmceError::io(path, e))
}

/// Reads `path`, then checks its length and FNV-1a digest.
pub(crate) fn read_verified(path: &Path, expected_len: u64, expected_hex: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| PmceError::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if bytes.len() as u64 != expected_len {
        return Err(PmceError::Truncated {
            file: name,
            expected: expected_len,
            actual: bytes.len() as u64,
        });
    }
    let actual = fnv1a64_hex(&bytes);
    if !actual.eq_ignore_ascii_case(expected_hex) {
        return Err(PmceError::ChecksumMismatch {
            file: name,
            expected: expected_hex.to_string(),
            actual,
        });
    }
    Ok(bytes)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PmceError::json(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PmceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PmceError::json(path, e))
}
