//! Run manifests: every command invocation records its inputs (by content
//! hash), resolved configuration, seed, and outputs (by content hash), so a
//! run can be replayed and checked for byte-identical results.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// A file path together with the SHA-256 of its contents. Output paths are
/// stored relative to the manifest's directory; input paths as given.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Subcommand name; replay dispatches on it.
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Unix milliseconds.
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes via a temp file in the target directory plus rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut temp = tempname(path);
    let mut attempts = 0;
    while temp.exists() {
        attempts += 1;
        if attempts > 100 {
            return Err(Error::Config(format!("cannot find a free temp name near {}", path.display())));
        }
        temp = tempname(path);
    }
    fs::write(&temp, bytes).map_err(|e| io_err(&temp, e))?;
    fs::rename(&temp, path).map_err(|e| {
        let _ = fs::remove_file(&temp);
        io_err(path, e)
    })
}

fn tempname(path: &Path) -> PathBuf {
    let stamp = now_ms();
    let pid = std::process::id();
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{pid}.{stamp}.tmp"))
}

/// Accumulates a manifest while a command runs: inputs are hashed as they
/// are declared, outputs hashed as they are written (atomically, inside the
/// output directory).
pub struct ManifestWriter {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestWriter {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        master_seed: u64,
        out_dir: &Path,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir)
            .map_err(|e| io_err(out_dir, e))?;
        Ok(ManifestWriter {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                command: command.to_owned(),
                config,
                master_seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at_ms: now_ms(),
                finished_at_ms: 0,
            },
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.push(FileDigest {
            path: path.to_string_lossy().into_owned(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    /// Writes one output file under the output directory and records its
    /// digest. `name` must be a bare file name, not a path.
    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        if name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("output name {name:?} must be a bare file name")));
        }
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(FileDigest {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Stamps the end time and writes the manifest itself (atomically) into
    /// the output directory. Returns the manifest path.
    pub fn finish(mut self, manifest_name: &str) -> Result<PathBuf> {
        self.manifest.finished_at_ms = now_ms();
        let path = self.out_dir.join(manifest_name);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = fs::read(path)
        .map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// One digest mismatch found during verification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigestMismatch {
    pub path: String,
    pub expected: String,
    /// None when the file is missing or unreadable.
    pub actual: Option<String>,
}

/// Rehashes every listed file and returns the mismatches. `base` is joined
/// in front of relative paths (use the manifest's directory for outputs).
pub fn verify_digests(digests: &[FileDigest], base: Option<&Path>) -> Vec<DigestMismatch> {
    let mut mismatches = Vec::new();
    for digest in digests {
        let raw = Path::new(&digest.path);
        let resolved: PathBuf = match base {
            Some(base) if raw.is_relative() => base.join(raw),
            _ => raw.to_path_buf(),
        };
        match hash_file(&resolved) {
            Ok(actual) if actual == digest.sha256 => {}
            Ok(actual) => mismatches.push(DigestMismatch {
                path: digest.path.clone(),
                expected: digest.sha256.clone(),
                actual: Some(actual),
            }),
            Err(_) => mismatches.push(DigestMismatch {
                path: digest.path.clone(),
                expected: digest.sha256.clone(),
                actual: None,
            }),
        }
    }
    mismatches
}
