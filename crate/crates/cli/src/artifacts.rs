//! Output directories, digests and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "run.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration as compact JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub threads: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: unreadable manifest: {e}", path.display())))
    }
}

/// Reads an input artifact. When the directory holding it carries a
/// manifest that lists the file, the content must still match the recorded
/// digest.
pub fn read_input(path: &Path) -> Result<(Vec<u8>, FileDigest), CliError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::validation(format!("input {} does not exist", path.display())),
        _ => CliError::from(e),
    })?;
    let digest = sha256_hex(&bytes);
    let manifest_path = path.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    if let (Some(name), true) = (path.file_name().and_then(|n| n.to_str()), manifest_path.is_file()) {
        let manifest = Manifest::read(&manifest_path)?;
        if let Some(recorded) = manifest.outputs.iter().find(|o| o.path == name) {
            if recorded.sha256 != digest {
                return Err(CliError::validation(format!(
                    "{} has changed since it was written: digest {} does not match {} recorded in {}",
                    path.display(),
                    digest,
                    recorded.sha256,
                    manifest_path.display()
                )));
            }
        }
    }
    Ok((bytes, FileDigest { path: path.display().to_string(), sha256: digest }))
}

/// Collects a command's outputs in a hidden sibling directory and moves it
/// into place only when every file has been written.
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    outputs: Vec<FileDigest>,
    committed: bool,
}

fn sibling(target: &Path, tag: &str) -> PathBuf {
    let name = target.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    target.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

impl Staging {
    pub fn new(target: &Path) -> Result<Staging, CliError> {
        if target.file_name().is_none() {
            return Err(CliError::validation(format!("output path {} has no directory name", target.display())));
        }
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = sibling(target, "tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        Ok(Staging { target: target.to_path_buf(), tmp, outputs: Vec::new(), committed: false })
    }

    /// Writes `rel` (a path inside the output directory) and records its digest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.tmp.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest { path: rel.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn outputs(&self) -> &[FileDigest] {
        &self.outputs
    }

    /// Writes the manifest and swaps the staged directory into place.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        manifest.outputs = self.outputs.clone();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.tmp.join(MANIFEST), text)?;
        let old = sibling(&self.target, "old");
        if self.target.exists() {
            if old.exists() {
                fs::remove_dir_all(&old)?;
            }
            fs::rename(&self.target, &old)?;
        }
        fs::rename(&self.tmp, &self.target)?;
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
