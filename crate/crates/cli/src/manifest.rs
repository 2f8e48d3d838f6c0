//! Run manifests: what was run, on which inputs, with which settings.

use std::fs;
use std::path::{Component, Path, PathBuf};

use anatda::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
    pub outputs: Vec<PathBuf>,
    pub inputs: Vec<InputDigest>,
    pub config: toml::Table,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: toml::Table) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started: now(),
            finished: None,
            outputs: Vec::new(),
            inputs: Vec::new(),
            config,
        }
    }

    /// Records the digest of a file or of a whole directory.
    pub fn add_input(&mut self, role: &str, path: &Path, manifest: &Path) -> Result<()> {
        let sha256 = digest_path(path)?;
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: relative_to(path, manifest_dir(manifest))?,
            sha256,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path, manifest: &Path) -> Result<()> {
        let rel = relative_to(path, manifest_dir(manifest))?;
        self.outputs.push(rel);
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished = Some(now());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("run manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn now() -> String {
    OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .unwrap_or_else(|_| "unknown".to_string())
}

fn manifest_dir(manifest: &Path) -> &Path {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// SHA-256 of a file, or of a directory as the sorted sequence of its
/// regular files (name, then contents).
pub fn digest_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    if meta.is_dir() {
        let mut names = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            if entry.file_type().map_err(|e| Error::io(path, e))?.is_file() {
                names.push(entry.file_name());
            }
        }
        names.sort();
        for name in names {
            let file = path.join(&name);
            h.update(name.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&file).map_err(|e| Error::io(&file, e))?);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// `target` expressed relative to the directory `base`.
pub fn relative_to(target: &Path, base: &Path) -> Result<PathBuf> {
    let target = absolute(target)?;
    let base = absolute(base)?;
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    Ok(out)
}

/// Absolute, symlink-resolved where the path exists.
fn absolute(p: &Path) -> Result<PathBuf> {
    if let Ok(c) = fs::canonicalize(p) {
        return Ok(c);
    }
    // not created yet: resolve the parent and keep the file name
    let name = p.file_name().map(PathBuf::from).unwrap_or_default();
    let parent = match p.parent() {
        Some(q) if !q.as_os_str().is_empty() => q.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let parent = fs::canonicalize(&parent).map_err(|e| Error::io(&parent, e))?;
    Ok(parent.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("a/b")).unwrap();
        fs::create_dir_all(root.join("c")).unwrap();
        assert_eq!(relative_to(&root.join("a/b"), &root.join("c")).unwrap(), PathBuf::from("../a/b"));
        assert_eq!(relative_to(&root.join("c/new.bin"), &root.join("c")).unwrap(), PathBuf::from("new.bin"));
        assert_eq!(relative_to(root, root).unwrap(), PathBuf::from("."));
    }

    #[test]
    fn directory_digest_depends_on_contents_only() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::write(d.join("x.txt"), "one").unwrap();
            fs::write(d.join("y.txt"), "two").unwrap();
        }
        assert_eq!(digest_path(a.path()).unwrap(), digest_path(b.path()).unwrap());
        fs::write(b.path().join("y.txt"), "three").unwrap();
        assert_ne!(digest_path(a.path()).unwrap(), digest_path(b.path()).unwrap());
        assert!(digest_path(&a.path().join("missing")).is_err());
    }
}
