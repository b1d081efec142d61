//! Reproducibility manifests written at the end of every CLI run.
//!
//! A manifest captures what would be needed to reproduce the run bitwise:
//! the subcommand, the fully resolved configuration, every RNG seed, the
//! tool version, and SHA-256 digests of all input files. The wall-clock
//! duration is informational and the only non-reproducible field.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{write_json_atomic, IoError};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Subcommand name.
    pub command: String,
    /// Fully resolved configuration snapshot.
    pub config: serde_json::Value,
    /// Every seed the run consumed, by role.
    pub seeds: BTreeMap<String, u64>,
    /// Tool version (crate version at build time).
    pub version: String,
    /// SHA-256 of each input file, keyed by the path as given.
    pub input_digests: BTreeMap<String, String>,
    /// Wall-clock runtime in seconds; informational only.
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> RunManifest {
        RunManifest {
            schema_version: 1,
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            input_digests: BTreeMap::new(),
            duration_seconds: 0.0,
        }
    }

    pub fn record_seed(&mut self, role: impl Into<String>, seed: u64) {
        self.seeds.insert(role.into(), seed);
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), IoError> {
        let digest = sha256_hex_file(path)?;
        self.input_digests.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Write `run_manifest.json` into `dir` atomically.
    pub fn write_into(&self, dir: &Path) -> Result<(), IoError> {
        write_json_atomic(&dir.join(MANIFEST_FILE), self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn sha256_matches_known_vectors() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempdir().unwrap();
        let input = dir.path().join("input.bin");
        std::fs::write(&input, b"abc").unwrap();

        let mut m = RunManifest::new("simulate", serde_json::json!({"rho": 0.03}));
        m.record_seed("noise", 7);
        m.record_input(&input).unwrap();
        m.duration_seconds = 1.25;
        m.write_into(dir.path()).unwrap();

        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.schema_version, 1);
        assert_eq!(back.command, "simulate");
        assert_eq!(back.seeds["noise"], 7);
        assert_eq!(
            back.input_digests[&input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(back.config["rho"], serde_json::json!(0.03));
        assert!(!back.version.is_empty());
    }
}
