//! Parameter checkpoints.
//!
//! Layout: magic `b"JCDC"`, a `u32` little-endian header length `H`, `H` bytes of UTF-8
//! JSON, then the tensor payload as little-endian `f32`. The header is
//!
//! ```json
//! {"version": 1, "epoch": 3, "config": { ...ModelConfig... },
//!  "tensors": [{"name": "cad.embed.w", "shape": [3, 64, 32], "offset": 0}, ...]}
//! ```
//!
//! where `offset` counts bytes from the start of the payload. Tensors are stored in
//! parameter-layout order with no padding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DataError};
use crate::model::{ModelConfig, Params};
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JCDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    #[serde(default)]
    pub epoch: Option<usize>,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: Option<usize>,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.entries() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len();
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.entries() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a checkpoint image, including that its tensors match the
    /// layout implied by its own config.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, DataError> {
        let fmt = |offset: usize, detail: String| DataError::Format {
            path: path.to_string(),
            offset,
            detail,
        };
        if bytes.len() < 8 {
            return Err(fmt(0, format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, format!("bad magic {:02x?}", &bytes[0..4])));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(h)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(4, format!("header length {} exceeds file", h)))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| fmt(8, format!("header: {}", e)))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(fmt(8, format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let mut entries = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(fmt(
                    8,
                    format!(
                        "tensor {} offset {} (expected {})",
                        e.name, e.offset, expected_offset
                    ),
                ));
            }
            let end = e.offset + 4 * n;
            if end > payload.len() {
                return Err(fmt(
                    payload_start + payload.len(),
                    format!(
                        "tensor {} needs bytes up to {}, payload has {}",
                        e.name,
                        end,
                        payload.len()
                    ),
                ));
            }
            let mut data = Vec::with_capacity(n);
            for (i, c) in payload[e.offset..end].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        path: path.to_string(),
                        offset: payload_start + e.offset + 4 * i,
                    });
                }
                data.push(v);
            }
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| fmt(8, format!("tensor {}: {}", e.name, err)))?;
            entries.push((e.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(fmt(
                payload_start + expected_offset,
                format!(
                    "payload expected {} bytes, found {}",
                    expected_offset,
                    payload.len()
                ),
            ));
        }
        let params = Params::from_entries(entries);
        header
            .config
            .validate()
            .map_err(|e| fmt(8, format!("config: {}", e)))?;
        params
            .check_layout(&header.config)
            .map_err(|e| fmt(8, e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Errors, naming the offending tensors, when the stored parameters do not fit `cfg`.
    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<(), DataError> {
        self.params
            .check_layout(cfg)
            .map_err(|e| DataError::Config(format!("checkpoint does not match config: {}", e)))
    }
}
