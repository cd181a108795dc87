use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Audit record written after every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved flag values; feeding this file back through `--config` repeats the run.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub version: String,
    pub duration_secs: f64,
    pub exit_code: u8,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        inputs: &[PathBuf],
        elapsed: Duration,
        exit_code: u8,
    ) -> anyhow::Result<Self> {
        let seed = config.get("seed").and_then(|s| s.as_u64());
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hash_into(p, &mut hashes)?;
        }
        Ok(RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: hashes,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: elapsed.as_secs_f64(),
            exit_code,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Directories are hashed file by file in name order.
fn hash_into(path: &Path, out: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for e in entries {
            out.insert(e.display().to_string(), sha256_file(&e)?);
        }
    } else {
        out.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, b"abc").unwrap();
        assert_eq!(
            sha256_file(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let m = RunManifest::new(
            "eval",
            serde_json::json!({"seed": 5}),
            &[dir.path().to_path_buf()],
            Duration::from_millis(1),
            0,
        )
        .unwrap();
        assert_eq!(m.seed, Some(5));
        assert_eq!(m.inputs.len(), 1);
    }
}
