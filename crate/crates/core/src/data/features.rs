//! `JCDF` feature files: a 14-byte header followed by row-major little-endian `f32`.
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `b"JCDF"`       |
//! | 4      | 2    | version (`u16`, = 1)  |
//! | 6      | 4    | T (`u32`, snippets)   |
//! | 10     | 4    | F2 (`u32`, width)     |
//! | 14     | 4·T·F2 | payload             |

use std::path::Path;

use super::{write_atomic, DataError};
use crate::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"JCDF";
pub const FEATURE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

pub fn encode_features(x: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    let (t, f) = x.dims2().map_err(|_| {
        DataError::Config(format!("feature matrix must be 2-D, got {:?}", x.shape()))
    })?;
    if t == 0 || f == 0 {
        return Err(DataError::Config(format!(
            "empty feature matrix {}x{}",
            t, f
        )));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite {
            path: String::new(),
            offset: HEADER_LEN + 4 * i,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * x.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file image. `path` is only used in error messages.
pub fn decode_features(bytes: &[u8], path: &str) -> Result<Tensor<f32>, DataError> {
    let fmt = |offset: usize, detail: String| DataError::Format {
        path: path.to_string(),
        offset,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!(
                "header needs {} bytes, file has {}",
                HEADER_LEN,
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(fmt(4, format!("unsupported version {}", version)));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if t == 0 {
        return Err(fmt(6, "zero snippets".into()));
    }
    if f == 0 {
        return Err(fmt(10, "zero feature width".into()));
    }
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt(6, format!("size {}x{} overflows", t, f)))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(fmt(
            HEADER_LEN,
            format!("payload expected {} bytes, found {}", expected, actual),
        ));
    }
    let mut data = Vec::with_capacity(t * f);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                path: path.to_string(),
                offset: HEADER_LEN + 4 * i,
            });
        }
        data.push(v);
    }
    Ok(Tensor::matrix(t, f, data).expect("length checked"))
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

/// Writes through a temporary file so a failed write leaves nothing behind.
pub fn save_features(path: &Path, x: &Tensor<f32>) -> Result<(), DataError> {
    let bytes = encode_features(x)?;
    write_atomic(path, &bytes)
}
