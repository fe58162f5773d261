//! The "DDIT1" binary container used for checkpoints, feature dumps, sample
//! dumps, and dataset dumps.
//!
//! Layout:
//!
//! ```text
//! bytes 0..5   ASCII magic "DDIT1"
//! byte  5      format version (0x01)
//! bytes 6..10  little-endian u32 manifest byte length
//! ...          UTF-8 JSON manifest
//! ...          raw little-endian IEEE-754 f64 payload
//! ```
//!
//! The manifest is `{"tensors": [...], "config": {...}, "step": n, "rng":
//! hex}` with tensor entries `{"name", "shape", "dtype": "f64", "offset",
//! "len"}`; `offset` and `len` are byte positions relative to the payload
//! start. Serialization is field-order stable, so save → load → save is
//! byte-identical.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::TensorValue;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"DDIT1";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length (8 × element count).
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
    pub step: u64,
    pub rng: String,
    /// Noise timestep of a feature dump, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

/// Writes a container. Tensor payload order follows the slice order.
pub fn write_container(
    path: &Path,
    config: &RunConfig,
    step: u64,
    rng_hex: &str,
    t: Option<f64>,
    tensors: &[(String, &TensorValue)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, tensor) in tensors {
        let len = (tensor.numel() * 8) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        tensors: entries,
        config: config.clone(),
        step,
        rng: rng_hex.to_string(),
        t,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let manifest_len = u32::try_from(manifest_json.len())
        .map_err(|_| Error::InvalidArgument("manifest too large".into()))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&[VERSION])?;
    file.write_all(&manifest_len.to_le_bytes())?;
    file.write_all(&manifest_json)?;
    for (_, tensor) in tensors {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// A parsed container with lazy tensor decoding.
pub struct Container {
    pub manifest: Manifest,
    payload: Vec<u8>,
}

impl Container {
    pub fn read(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Container> {
        if bytes.len() < 5 || &bytes[..5] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(Error::Truncated("missing version byte".into()));
        }
        if bytes[5] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[5]));
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated("missing manifest length".into()));
        }
        let manifest_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let manifest_end = 10 + manifest_len;
        if bytes.len() < manifest_end {
            return Err(Error::Truncated(format!(
                "manifest claims {manifest_len} bytes, file has {}",
                bytes.len().saturating_sub(10)
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[10..manifest_end])
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        let payload = bytes[manifest_end..].to_vec();
        for entry in &manifest.tensors {
            if entry.dtype != "f64" {
                return Err(Error::MalformedManifest(format!(
                    "tensor {:?} has unsupported dtype {:?}",
                    entry.name, entry.dtype
                )));
            }
            let elems: usize = entry.shape.iter().product();
            if entry.len != (elems * 8) as u64 {
                return Err(Error::MalformedManifest(format!(
                    "tensor {:?}: len {} does not match shape {:?}",
                    entry.name, entry.len, entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.len)
                .ok_or_else(|| Error::MalformedManifest("tensor extent overflow".into()))?;
            if end > payload.len() as u64 {
                return Err(Error::Truncated(format!(
                    "tensor {:?} extends to byte {end} of a {}-byte payload",
                    entry.name,
                    payload.len()
                )));
            }
        }
        Ok(Container { manifest, payload })
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.manifest.tensors.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|e| e.name == name)
    }

    /// Decodes a named tensor as a plain (grad-free) value.
    pub fn tensor(&self, name: &str) -> Result<TensorValue> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        let data: Vec<f64> = self.payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
            .collect();
        TensorValue::new(entry.shape.clone(), data)
    }
}
