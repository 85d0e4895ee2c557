//! Content-addressed artifact files.

use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// A directory of files named `<sha256>.<ext>`.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ArtifactStore { dir })
    }

    /// Stores `bytes` and returns the artifact name. Storing the same bytes
    /// twice yields the same name and one file.
    pub fn put(&self, bytes: &[u8], ext: &str) -> io::Result<String> {
        let name = format!("{}.{ext}", digest(bytes));
        let path = self.dir.join(&name);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(name)
    }

    /// Path of a stored artifact, or `None` for names that are not of the
    /// `<sha256>.<ext>` form or not present.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let (hash, ext) = name.split_once('.')?;
        let hex = hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase());
        if !hex || ext.is_empty() || !ext.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return None;
        }
        let path = self.dir.join(name);
        path.is_file().then_some(path)
    }

    pub fn get(&self, name: &str) -> io::Result<Vec<u8>> {
        match self.path(name) {
            Some(p) => std::fs::read(p),
            None => Err(io::Error::new(io::ErrorKind::NotFound, format!("no artifact {name}"))),
        }
    }
}
