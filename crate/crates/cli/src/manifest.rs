//! Run manifests: a JSON record of what a command ran with and what it
//! produced. Fields are ordered and timestamps omitted so a repeated
//! deterministic run writes the identical manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunArtifacts;

pub const MANIFEST_VERSION: u32 = 1;

/// Size and content hash of one file touched by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything needed to reproduce and verify a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// The argument list as given, without the program name; `rerun`
    /// replays it verbatim.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Whether replaying `argv` reproduces the outputs byte for byte.
    pub deterministic: bool,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
}

impl RunManifest {
    /// Stamp the artifact lists of a finished run.
    pub fn collect(subcommand: &str, argv: &[String], artifacts: &RunArtifacts) -> Result<Self> {
        Ok(RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool: "kgchat".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            seed: artifacts.seed,
            deterministic: artifacts.deterministic,
            inputs: stamp_all(&artifacts.inputs)?,
            outputs: stamp_all(&artifacts.outputs)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).context("serializing run manifest")?;
        json.push('\n');
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
        }
        fs::write(path, json).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Default manifest location: next to the primary output when there is
/// one, otherwise `<subcommand>.manifest.json` in the working directory.
pub fn default_path(subcommand: &str, primary_output: Option<&PathBuf>) -> PathBuf {
    match primary_output {
        Some(out) => {
            let mut name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| subcommand.to_string());
            name.push_str(".manifest.json");
            out.with_file_name(name)
        }
        None => PathBuf::from(format!("{subcommand}.manifest.json")),
    }
}

pub fn stamp(path: &Path) -> Result<FileStamp> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileStamp {
        path: path.to_path_buf(),
        bytes: bytes.len() as u64,
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

fn stamp_all(paths: &[PathBuf]) -> Result<Vec<FileStamp>> {
    let mut stamps = Vec::with_capacity(paths.len());
    for path in paths {
        // The same file can back two flags; stamp it once.
        if stamps.iter().any(|s: &FileStamp| &s.path == path) {
            continue;
        }
        stamps.push(stamp(path)?);
    }
    Ok(stamps)
}

fn hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
