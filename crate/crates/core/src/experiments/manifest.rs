use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::artifact::{json_hash, read_artifact, to_json_bytes, write_artifact, Artifact};
use crate::error::Result;

pub const RESULT_FILE: &str = "result.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub seed: u64,
    /// The full experiment configuration; re-running from it reproduces the result.
    pub config: serde_json::Value,
    pub config_checksum: String,
    pub model_checksum: String,
    pub dataset_fingerprints: BTreeMap<String, String>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field allowed to differ between equal runs.
    pub timestamp: u64,
    pub outputs: Vec<String>,
    /// SHA-256 of the result artifact bytes.
    pub result_sha256: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        experiment: &str,
        seed: u64,
        config: &C,
        model_checksum: &str,
        dataset_fingerprints: BTreeMap<String, String>,
    ) -> Result<Self> {
        Ok(RunManifest {
            experiment: experiment.into(),
            seed,
            config: serde_json::to_value(config)?,
            config_checksum: json_hash(config),
            model_checksum: model_checksum.into(),
            dataset_fingerprints,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            outputs: Vec::new(),
            result_sha256: String::new(),
        })
    }
}

/// Writes `result.json` and `manifest.json` under `dir`; returns the result path.
pub fn write_run<T: Serialize>(dir: &Path, mut manifest: RunManifest, result: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let result_path = dir.join(RESULT_FILE);
    let bytes = to_json_bytes(&Artifact::new(&manifest.experiment, result))?;
    std::fs::write(&result_path, &bytes)?;
    manifest.result_sha256 = crate::artifact::sha256_hex(&bytes);
    manifest.outputs = vec![RESULT_FILE.into(), MANIFEST_FILE.into()];
    write_artifact(&dir.join(MANIFEST_FILE), "manifest", &manifest)?;
    Ok(result_path)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_artifact(&dir.join(MANIFEST_FILE), "manifest")
}
