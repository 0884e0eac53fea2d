//! Run manifests: enough recorded state to re-execute a command and check
//! that it reproduces its artifacts byte for byte.
//!
//! A manifest records the subcommand argv, the resolved configuration, the
//! seeds in play, and SHA-256 digests of every input and output file. It
//! deliberately contains no timestamps or host information, so two
//! identical runs write identical manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String cannot fail");
    }
    s
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// A path with the digest its contents had when recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

pub fn stamp_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<FileStamp>> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(FileStamp {
            path: p.as_ref().display().to_string(),
            sha256: sha256_file(p)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Full argv after the binary name; replay re-executes exactly this.
    pub args: Vec<String>,
    /// Resolved configuration after defaults, config file, and flags.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("static schema");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Re-hash every recorded output; returns the paths whose current
    /// contents differ from the recorded digests.
    pub fn verify_outputs(&self) -> Result<Vec<String>> {
        let mut mismatched = Vec::new();
        for stamp in &self.outputs {
            let current = sha256_file(&stamp.path)?;
            if current != stamp.sha256 {
                mismatched.push(stamp.path.clone());
            }
        }
        Ok(mismatched)
    }
}

/// Where a command's run manifest lives: inside an output directory, or
/// next to a single output file.
pub fn manifest_path_for(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    }
}
