//! Binary tensor archives.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "HTCNARCH"
//! version  u32 LE
//! dtype    u8       4 = f32, 8 = f64
//! hlen     u32 LE   header length
//! header   hlen bytes of UTF-8 JSON {"kind", "meta", "tensors": [{"name", "shape"}]}
//! payload  every tensor's values, little-endian, in header order
//! ```
//!
//! Encoding is canonical: `encode(decode(b)) == b` for any `b` produced by
//! `encode`.

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Network, NetworkParams, ParamSet};
use crate::numerics::{Dtype, Real, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"HTCNARCH";
pub const ARCHIVE_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 1 + 4;
const MAX_HEADER: usize = 16 << 20;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("truncated archive: need {need} bytes at offset {offset}, have {have}")]
    Truncated { offset: usize, need: usize, have: usize },
    #[error("bad magic bytes")]
    Magic,
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("unknown dtype tag {0}")]
    DtypeTag(u8),
    #[error("archive stores {stored:?} values, caller expects {wanted:?}")]
    Dtype { stored: Dtype, wanted: Dtype },
    #[error("header: {0}")]
    Header(String),
    #[error("{extra} trailing bytes after payload")]
    Trailing { extra: usize },
    #[error("layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named list of tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Archive<T> {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_archive<T: Real>(a: &Archive<T>) -> Vec<u8> {
    let header = Header {
        kind: a.kind.clone(),
        meta: a.meta.clone(),
        tensors: a
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values: usize = a.tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + values * T::DTYPE.tag() as usize);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &a.tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], offset: usize, need: usize) -> Result<&'a [u8], CheckpointError> {
    offset
        .checked_add(need)
        .and_then(|end| bytes.get(offset..end))
        .ok_or(CheckpointError::Truncated {
            offset,
            need,
            have: bytes.len().saturating_sub(offset),
        })
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32, CheckpointError> {
    let b = take(bytes, offset, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads the dtype tag without decoding the rest.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype, CheckpointError> {
    if take(bytes, 0, 8)? != ARCHIVE_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32_at(bytes, 8)?;
    if version != ARCHIVE_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = take(bytes, 12, 1)?[0];
    Dtype::from_tag(tag).ok_or(CheckpointError::DtypeTag(tag))
}

pub fn decode_archive<T: Real>(bytes: &[u8]) -> Result<Archive<T>, CheckpointError> {
    let stored = peek_dtype(bytes)?;
    if stored != T::DTYPE {
        return Err(CheckpointError::Dtype {
            stored,
            wanted: T::DTYPE,
        });
    }
    let hlen = u32_at(bytes, 13)? as usize;
    if hlen > MAX_HEADER {
        return Err(CheckpointError::Header(format!("header length {hlen} too large")));
    }
    let raw = take(bytes, PREAMBLE, hlen)?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    // canonical form only, so that encode(decode(b)) == b
    if serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))? != raw {
        return Err(CheckpointError::Header("header is not in canonical form".into()));
    }
    let width = stored.tag() as usize;
    let mut offset = PREAMBLE + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len().min(1024));
    for entry in header.tensors {
        if entry.shape.len() > MAX_RANK {
            return Err(CheckpointError::Header(format!("tensor {} has rank {}", entry.name, entry.shape.len())));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| CheckpointError::Header(format!("tensor {} size overflows", entry.name)))?;
        let chunk = take(bytes, offset, count)?;
        let data: Vec<T> = chunk.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push((entry.name, t));
        offset += count;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Trailing {
            extra: bytes.len() - offset,
        });
    }
    Ok(Archive {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

const MODEL_KIND: &str = "model";

/// Serializes θ and ξ with the architecture needed to rebuild them.
pub fn save_checkpoint<T: Real>(params: &NetworkParams<T>) -> Vec<u8> {
    let meta = serde_json::json!({ "arch": params.arch });
    let mut a = Archive::new(MODEL_KIND, meta);
    for (n, t) in params.online.iter() {
        a.push(format!("online/{n}"), t.clone());
    }
    for (n, t) in params.target.iter() {
        a.push(format!("target/{n}"), t.clone());
    }
    encode_archive(&a)
}

/// Inverse of [`save_checkpoint`]; validates every tensor against the
/// layout implied by the stored architecture.
pub fn load_checkpoint<T: Real>(bytes: &[u8]) -> Result<NetworkParams<T>, CheckpointError> {
    let a: Archive<T> = decode_archive(bytes)?;
    if a.kind != MODEL_KIND {
        return Err(CheckpointError::Layout(format!("expected a model archive, found {:?}", a.kind)));
    }
    let arch: ArchSpec = a
        .meta
        .get("arch")
        .cloned()
        .ok_or_else(|| CheckpointError::Layout("missing arch".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| CheckpointError::Layout(e.to_string())))?;
    let net = Network::new(&arch).map_err(|e| CheckpointError::Layout(e.to_string()))?;
    let mut online = ParamSet::new();
    let mut target = ParamSet::new();
    for (name, t) in a.tensors {
        if let Some(n) = name.strip_prefix("online/") {
            online.push(n, t);
        } else if let Some(n) = name.strip_prefix("target/") {
            target.push(n, t);
        } else {
            return Err(CheckpointError::Layout(format!("unexpected tensor {name}")));
        }
    }
    net.check_params(&online, true)
        .and_then(|_| net.check_params(&target, false))
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok(NetworkParams { arch, online, target })
}
