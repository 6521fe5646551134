//! Binary container shared by checkpoints and epoch files.
//!
//! Layout: 8-byte magic, `u64` little-endian manifest length, the JSON
//! manifest, the little-endian array payload, then an 8-byte checksum. The
//! checksum is the first 8 bytes of SHA-256 over everything before it, read
//! as a little-endian `u64`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Precision, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("bad manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
    config: serde_json::Value,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Serializes `arrays` under `magic`. Single-precision tensors are stored as
/// `f32`, double as `f64`.
pub fn encode(magic: &[u8; 8], config: serde_json::Value, arrays: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        let offset = payload.len();
        match t.precision() {
            Precision::Single => t.data().iter().for_each(|v| payload.extend((*v as f32).to_le_bytes())),
            Precision::Double => t.data().iter().for_each(|v| payload.extend(v.to_le_bytes())),
        }
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: t.precision().dtype().to_string(),
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        arrays: entries,
        config,
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(24 + manifest.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend((manifest.len() as u64).to_le_bytes());
    out.extend(manifest);
    out.extend(payload);
    let sum = checksum(&out);
    out.extend(sum.to_le_bytes());
    out
}

/// Inverse of [`encode`]. The first seven magic bytes name the format and the
/// last one its version, so a version bump is reported separately from a
/// foreign file.
pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>), ContainerError> {
    if bytes.len() < 24 {
        return Err(ContainerError::Truncated);
    }
    let found = &bytes[..8];
    if found != magic {
        let show = |b: &[u8]| String::from_utf8_lossy(b).into_owned();
        return Err(if found[..7] == magic[..7] {
            ContainerError::Version {
                expected: show(&magic[7..]),
                found: show(&found[7..]),
            }
        } else {
            ContainerError::BadMagic {
                expected: show(&magic[..7]),
                found: show(found),
            }
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if mlen > body.len() - 16 {
        return Err(ContainerError::Truncated);
    }
    let computed = checksum(body);
    if computed != stored {
        return Err(ContainerError::Checksum { stored, computed });
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[16..16 + mlen]).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    let payload = &body[16 + mlen..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in manifest.arrays {
        let precision = Precision::from_dtype(&e.dtype)
            .ok_or_else(|| ContainerError::Manifest(format!("{}: unknown dtype {}", e.name, e.dtype)))?;
        let width = if precision == Precision::Single { 4 } else { 8 };
        let numel: usize = e.shape.iter().product();
        if e.length != numel * width || e.offset.checked_add(e.length).is_none_or(|end| end > payload.len()) {
            return Err(ContainerError::Manifest(format!(
                "{}: extent does not match payload",
                e.name
            )));
        }
        let raw = &payload[e.offset..e.offset + e.length];
        let data: Vec<f64> = match precision {
            Precision::Single => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::Double => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(&e.shape, data, precision)
            .map_err(|err| ContainerError::Manifest(format!("{}: {err}", e.name)))?;
        arrays.push((e.name, t));
    }
    Ok((manifest.config, arrays))
}
