//! Run manifests: the config snapshot, dataset fingerprint, seed list,
//! and output location of one run. Every emitted report names its
//! manifest id; re-running a manifest reproduces the reports and
//! checkpoints byte for byte (training logs carry wall-clock timings and
//! are excluded from that claim).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use rgcl::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub dataset_fingerprint: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub output_dir: String,
}

impl RunManifest {
    pub fn new(
        dataset_fingerprint: String,
        label: &str,
        seeds: Vec<u64>,
        config: TrainConfig,
        output_dir: &Path,
    ) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_fingerprint,
            label: label.to_string(),
            seeds,
            config,
            output_dir: output_dir.display().to_string(),
        }
    }

    /// Short content id naming this manifest in reports.
    pub fn id(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 12)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)
    }
}

pub fn file_fingerprint(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex_prefix(&digest, 64))
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}
