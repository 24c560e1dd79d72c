//! Binary tensor container shared by adapters and base-model checkpoints.
//!
//! Layout: `"BWLA"` | version u32 LE | metadata length u64 LE | metadata
//! (UTF-8 JSON) | zero padding to a 64-byte boundary | tensor payload.
//! Every tensor starts on a 64-byte boundary; `byte_offset` in the tensor
//! table is relative to the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"BWLA";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub path: String,
    /// `"A"` / `"B"` for adapter factors, `"param"` for model weights.
    pub role: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

/// Container metadata. Fields beyond the fixed set are kept in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub trigger_token: String,
    pub base_model_fingerprint: String,
    #[serde(default)]
    pub alpha: BTreeMap<String, f64>,
    #[serde(default)]
    pub ranks: BTreeMap<String, usize>,
    pub tensors: Vec<TensorRecord>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// A tensor queued for writing.
pub struct Entry<'a, T: Element> {
    pub path: String,
    pub role: &'static str,
    pub tensor: &'a Tensor<T>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `meta` (its tensor table is rebuilt) and the entries.
pub fn encode<T: Element>(mut meta: Metadata, entries: &[Entry<'_, T>]) -> Result<Vec<u8>> {
    let mut payload: Vec<u8> = Vec::new();
    meta.tensors.clear();
    for e in entries {
        payload.resize(align_up(payload.len()), 0);
        let start = payload.len();
        for v in e.tensor.data() {
            v.write_le(&mut payload);
        }
        meta.tensors.push(TensorRecord {
            path: e.path.clone(),
            role: e.role.to_string(),
            dtype: T::DTYPE,
            shape: e.tensor.shape().to_vec(),
            byte_offset: start as u64,
            byte_length: (payload.len() - start) as u64,
        });
    }
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + ALIGN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write<T: Element>(path: &Path, meta: Metadata, entries: &[Entry<'_, T>]) -> Result<()> {
    let bytes = encode(meta, entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// A parsed container. Tensor bytes are validated but decoded lazily.
#[derive(Debug)]
pub struct Container {
    pub meta: Metadata,
    bytes: Vec<u8>,
    payload_start: usize,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Container {
    pub fn read(path: &Path) -> Result<Container> {
        Container::parse(std::fs::read(path)?)
    }

    pub fn parse(bytes: Vec<u8>) -> Result<Container> {
        if bytes.len() < 4 {
            return Err(format_err(bytes.len(), "truncated before magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(0, "bad magic (expected \"BWLA\")"));
        }
        if bytes.len() < 8 {
            return Err(format_err(bytes.len(), "truncated before version"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        if bytes.len() < PREAMBLE {
            return Err(format_err(bytes.len(), "truncated before metadata length"));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let meta_end = (PREAMBLE as u64)
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| format_err(bytes.len(), format!("truncated metadata (declared {meta_len} bytes)")))?
            as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[PREAMBLE..meta_end])
            .map_err(|e| format_err(PREAMBLE + e.column().saturating_sub(1), format!("invalid metadata: {e}")))?;
        let payload_start = align_up(meta_end);
        for rec in &meta.tensors {
            let expected = rec.shape.iter().product::<usize>() * rec.dtype.size();
            if rec.byte_length as usize != expected {
                return Err(format_err(
                    payload_start + rec.byte_offset as usize,
                    format!("tensor '{}' length {} does not match shape {:?}", rec.path, rec.byte_length, rec.shape),
                ));
            }
            if rec.byte_offset as usize % ALIGN != 0 {
                return Err(format_err(
                    payload_start + rec.byte_offset as usize,
                    format!("tensor '{}' is not {ALIGN}-byte aligned", rec.path),
                ));
            }
            let end = payload_start as u64 + rec.byte_offset + rec.byte_length;
            if end > bytes.len() as u64 {
                return Err(format_err(bytes.len(), format!("truncated payload for tensor '{}'", rec.path)));
            }
        }
        Ok(Container {
            meta,
            bytes,
            payload_start,
        })
    }

    /// Decodes a tensor, converting to `T` if the stored dtype differs.
    pub fn tensor<T: Element>(&self, rec: &TensorRecord) -> Tensor<T> {
        let start = self.payload_start + rec.byte_offset as usize;
        let raw = &self.bytes[start..start + rec.byte_length as usize];
        let data: Vec<T> = match rec.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        Tensor::new(data, &rec.shape).expect("length validated at parse time")
    }

    pub fn find(&self, path: &str, role: &str) -> Option<&TensorRecord> {
        self.meta.tensors.iter().find(|r| r.path == path && r.role == role)
    }
}
