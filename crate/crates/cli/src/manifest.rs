//! Output manifest: every file under the output directory with its size
//! and SHA-256, plus the command and resolved configuration.

use std::path::Path;

use amber_afno::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub files: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> CliResult<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = p.metadata().map(|m| m.len()).unwrap_or(0);
            out.push(FileEntry { sha256: sha256_file(&p)?, path: rel, bytes });
        }
    }
    Ok(())
}

/// Hashes everything under `dir` and writes `manifest.json` there.
pub fn write(dir: &Path, command: &str, config: &RunConfig) -> CliResult<RunManifest> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    let manifest = RunManifest { command: command.into(), config: config.clone(), files };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_skips_itself_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        write_text(&dir.path().join("b/x.txt"), "x").unwrap();
        write_text(&dir.path().join("a.txt"), "a").unwrap();
        write(dir.path(), "t", &RunConfig::default()).unwrap();
        let m = write(dir.path(), "t", &RunConfig::default()).unwrap();
        let names: Vec<_> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["a.txt", "b/x.txt"]);
    }
}
