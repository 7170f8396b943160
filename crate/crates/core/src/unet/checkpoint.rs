//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "WSEGCKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (config, manifest, metadata)
//! blob_len     u64
//! blob         blob_len bytes, f32 little-endian parameters
//! ```
//!
//! Manifest entries carry name, shape, byte offset and byte length. Their
//! ranges must be contiguous, in order, and cover the blob exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layer_manifest, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"WSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    manifest: Vec<ManifestEntry>,
    meta: TrainingMeta,
}

/// A model together with its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: UNet<f32>, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        let mut offset = 0u64;
        for (spec, p) in self.model.manifest().iter().zip(self.model.params()) {
            let length = 4 * p.len() as u64;
            manifest.push(ManifestEntry {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let header = Header {
            config: self.model.config().clone(),
            manifest,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(28 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&offset.to_le_bytes());
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Reader { bytes, pos: 0 };
        if cursor.take(8)? != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = cursor.u64()? as usize;
        let header: Header = serde_json::from_slice(cursor.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let blob_len = cursor.u64()?;
        let blob = cursor.rest();
        if blob.len() as u64 != blob_len {
            return Err(Error::Checkpoint(format!(
                "blob is {} bytes but header declares {blob_len}",
                blob.len()
            )));
        }

        let mut expected_offset = 0u64;
        for e in &header.manifest {
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {} starts at {} instead of {expected_offset}",
                    e.name, e.offset
                )));
            }
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.length != 4 * numel {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {} has {} bytes for shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            expected_offset += e.length;
        }
        if expected_offset != blob_len {
            return Err(Error::Checkpoint(format!(
                "manifest covers {expected_offset} bytes but blob has {blob_len}"
            )));
        }

        let specs = layer_manifest(&header.config)?;
        if specs.len() != header.manifest.len()
            || specs
                .iter()
                .zip(&header.manifest)
                .any(|(s, e)| s.name != e.name || s.shape != e.shape)
        {
            return Err(Error::Checkpoint(
                "manifest does not match the architecture of the stored config".into(),
            ));
        }

        let params = header
            .manifest
            .iter()
            .map(|e| {
                let raw = &blob[e.offset as usize..(e.offset + e.length) as usize];
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model: UNet::from_params(header.config, params)?,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

impl UNet<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(self.clone(), TrainingMeta::default()).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNet<f32> {
        UNet::build(UNetConfig::with_phi(0.0625), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut meta = TrainingMeta {
            epoch: 7,
            seed: 11,
            ..Default::default()
        };
        meta.metrics.insert("val_mean_iou".into(), 0.5);
        let ck = Checkpoint::new(tiny(), meta);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for (a, b) in ck.model.params().iter().zip(back.model.params()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = Checkpoint::new(tiny(), TrainingMeta::default()).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Version { found: 99, expected: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = Checkpoint::new(tiny(), TrainingMeta::default()).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
    }

    #[test]
    fn blob_length_disagreement_is_rejected() {
        let mut bytes = Checkpoint::new(tiny(), TrainingMeta::default()).to_bytes().unwrap();
        // Append four stray bytes and patch blob_len so only the manifest check fails.
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let at = 20 + header_len;
        let blob_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) + 4;
        bytes[at..at + 8].copy_from_slice(&blob_len.to_le_bytes());
        bytes.extend_from_slice(&[0; 4]);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("manifest covers"), "{err}");
    }
}
