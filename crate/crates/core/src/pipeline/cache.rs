use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Incremental cache key over labelled strings, JSON values and file contents.
#[derive(Default)]
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn text(mut self, label: &str, value: &str) -> Self {
        for part in [label, value] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part.as_bytes());
        }
        self
    }

    pub fn json(self, label: &str, value: &impl Serialize) -> Self {
        let text = serde_json::to_string(value).expect("cache key values serialize");
        self.text(label, &text)
    }

    pub fn file(self, label: &str, path: &Path) -> Result<Self> {
        let digest = sha256_file(path)?;
        Ok(self.text(label, &digest))
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    /// Output paths relative to the output directory, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("cache").join(format!("{stage}.manifest.json"))
}

pub fn read_manifest(out_dir: &Path, stage: &str) -> Option<Manifest> {
    let text = fs::read_to_string(manifest_path(out_dir, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

impl Manifest {
    pub fn build(out_dir: &Path, stage: &str, key: String, outputs: &[PathBuf]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for path in outputs {
            let rel = path
                .strip_prefix(out_dir)
                .map_err(|_| Error::invalid(format!("{} is outside the output directory", path.display())))?;
            map.insert(rel.to_string_lossy().into_owned(), sha256_file(path)?);
        }
        Ok(Self {
            stage: stage.to_string(),
            key,
            outputs: map,
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = manifest_path(out_dir, &self.stage);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Every recorded output exists and still has its recorded hash.
    pub fn outputs_intact(&self, out_dir: &Path) -> bool {
        !self.outputs.is_empty()
            && self
                .outputs
                .iter()
                .all(|(rel, digest)| sha256_file(&out_dir.join(rel)).is_ok_and(|d| &d == digest))
    }

    pub fn paths(&self, out_dir: &Path) -> Vec<PathBuf> {
        self.outputs.keys().map(|rel| out_dir.join(rel)).collect()
    }

    /// Drops the manifest and every output it lists.
    pub fn remove(&self, out_dir: &Path) {
        for p in self.paths(out_dir) {
            let _ = fs::remove_file(p);
        }
        let _ = fs::remove_file(manifest_path(out_dir, &self.stage));
    }
}

/// Advisory lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (delete {} if that run is gone)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_part() {
        let a = KeyBuilder::default().text("x", "1").json("y", &[1, 2]).finish();
        assert_eq!(a, KeyBuilder::default().text("x", "1").json("y", &[1, 2]).finish());
        assert_ne!(a, KeyBuilder::default().text("x", "2").json("y", &[1, 2]).finish());
        // length prefixes keep label/value boundaries unambiguous
        assert_ne!(
            KeyBuilder::default().text("ab", "c").finish(),
            KeyBuilder::default().text("a", "bc").finish()
        );
    }

    #[test]
    fn manifest_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cache")).unwrap();
        let out = dir.path().join("cache/a.bin");
        fs::write(&out, b"hello").unwrap();
        let m = Manifest::build(dir.path(), "s", "k".into(), &[out.clone()]).unwrap();
        m.write(dir.path()).unwrap();
        let back = read_manifest(dir.path(), "s").unwrap();
        assert_eq!(back, m);
        assert!(back.outputs_intact(dir.path()));
        fs::write(&out, b"hellp").unwrap();
        assert!(!back.outputs_intact(dir.path()));
        back.remove(dir.path());
        assert!(read_manifest(dir.path(), "s").is_none());
        assert!(!out.exists());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(OutputLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
