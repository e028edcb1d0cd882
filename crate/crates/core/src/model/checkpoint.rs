use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NLCK";
const DIGEST_LEN: usize = 32;

/// A model plus where it came from.
///
/// On disk: magic, `u32` format version, `u64` header length, JSON header
/// (config, parameter names and shapes, provenance), little-endian `f64`
/// parameter data, then a SHA-256 of every preceding byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Manifest of the run that produced the model, when known.
    pub provenance: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    provenance: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Model, provenance: Option<serde_json::Value>) -> Self {
        Checkpoint { model, provenance }
    }

    pub fn format_version(&self) -> u32 {
        CHECKPOINT_FORMAT_VERSION
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_versioned(CHECKPOINT_FORMAT_VERSION)
    }

    pub(crate) fn to_bytes_versioned(&self, version: u32) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            params: self
                .model
                .param_names()
                .iter()
                .zip(self.model.params())
                .map(|(n, p)| (n.clone(), p.shape().to_vec()))
                .collect(),
            provenance: self.provenance.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.model.n_params() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format {
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])?;
        let mut data = body[header_end..].chunks_exact(8);
        if data.remainder().len() != 0 {
            return Err(Error::Integrity("truncated parameter data".into()));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in header.params {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = data
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if vals.len() != n {
                return Err(Error::Integrity(format!("parameter block {name} is truncated")));
            }
            params.push((name, Tensor::new(shape, vals)?));
        }
        if data.next().is_some() {
            return Err(Error::Integrity("trailing parameter data".into()));
        }
        Ok(Checkpoint {
            model: Model::from_parts(header.config, params)?,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(self.clone(), None).save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Ok(Checkpoint::load(path)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::tiny;

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let m = tiny(12);
        let ck = Checkpoint::new(m.clone(), Some(serde_json::json!({"experiment": "unit"})));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.max_abs_diff(&m), 0.0);
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampering_is_integrity_error() {
        let mut bytes = Checkpoint::new(tiny(1), None).to_bytes();
        let i = bytes.len() - 100;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(b"junk"), Err(Error::Integrity(_))));
    }

    #[test]
    fn newer_version_is_format_error() {
        let bytes = Checkpoint::new(tiny(1), None).to_bytes_versioned(CHECKPOINT_FORMAT_VERSION + 1);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { found, expected }) => {
                assert_eq!(found, CHECKPOINT_FORMAT_VERSION + 1);
                assert_eq!(expected, CHECKPOINT_FORMAT_VERSION);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny(5);
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
    }
}
