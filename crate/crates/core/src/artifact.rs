//! Versioned JSON artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Envelope written around every persisted result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub format_version: u32,
    pub kind: String,
    pub payload: T,
}

impl<T> Artifact<T> {
    pub fn new(kind: &str, payload: T) -> Self {
        Artifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            kind: kind.to_string(),
            payload,
        }
    }
}

/// Pretty JSON with a trailing newline; the exact bytes written to disk.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_artifact<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_json_bytes(&Artifact::new(kind, payload))?)?;
    Ok(())
}

/// Reads an artifact, checking its version and kind.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Schema(format!("{} has no format_version", path.display())))? as u32;
    if found != ARTIFACT_FORMAT_VERSION {
        return Err(Error::Format {
            found,
            expected: ARTIFACT_FORMAT_VERSION,
        });
    }
    let art: Artifact<T> = serde_json::from_value(raw)?;
    if art.kind != kind {
        return Err(Error::Schema(format!(
            "{} holds a {} artifact, expected {kind}",
            path.display(),
            art.kind
        )));
    }
    Ok(art.payload)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a value's canonical JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serialises"))
}
