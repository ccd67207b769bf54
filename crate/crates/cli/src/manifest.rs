//! Run manifests: every subcommand records what it ran with — resolved
//! configuration, content digests of all inputs, seed, and tool version —
//! to `<primary output>.manifest.json` before writing any output file, so
//! a result can always be traced back to exact inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// RFC 3339 wall-clock time; the only field that varies between
    /// identical runs.
    pub timestamp_utc: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration after defaults, file, and flags.
    pub config: serde_json::Value,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Paths this run writes (besides the manifest itself).
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read input file {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Absolute form of a path that may not exist yet (outputs): canonical
/// parent + file name.
fn absolutish(path: &Path) -> PathBuf {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let parent = parent
        .and_then(|p| p.canonicalize().ok())
        .or_else(|| std::env::current_dir().ok())
        .unwrap_or_else(|| PathBuf::from("."));
    match path.file_name() {
        Some(name) => parent.join(name),
        None => parent,
    }
}

impl RunManifest {
    /// Digests every input and records the run. Fails if an input is
    /// missing or if an output path would overwrite an input (subcommands
    /// must never mutate their inputs).
    pub fn new(
        subcommand: &str,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<Self> {
        let input_abs: Vec<PathBuf> = inputs
            .iter()
            .map(|p| p.canonicalize().unwrap_or_else(|_| absolutish(p)))
            .collect();
        for (out, out_abs) in outputs.iter().map(|o| (o, absolutish(o))) {
            if input_abs.contains(&out_abs) {
                bail!(
                    "output path {} would overwrite an input file",
                    out.display()
                );
            }
        }
        let mut digests = BTreeMap::new();
        for path in inputs {
            digests.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(RunManifest {
            tool: "addrloc".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            timestamp_utc: chrono::Utc::now().to_rfc3339(),
            seed,
            config,
            inputs: digests,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    /// Writes the manifest to `<primary output>.manifest.json`. Called
    /// before the outputs themselves are written.
    pub fn write_next_to(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = PathBuf::from(format!("{}.manifest.json", primary_output.display()));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(path)
    }
}
