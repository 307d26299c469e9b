use std::fs;
use std::path::{Path, PathBuf};

use cldta::config::RunConfig;
use cldta::{Error, Result};
use sha2::{Digest, Sha256};

/// Where results go and the provenance line every result CSV starts with.
pub struct Output {
    dir: PathBuf,
    header: String,
}

impl Output {
    pub fn new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = hex::encode(Sha256::digest(cfg.fingerprint_json().as_bytes()));
        Ok(Self {
            dir: dir.to_path_buf(),
            header: format!("# config_sha256={hash} seed={}\n", cfg.seed),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `body` (column header and rows) after the provenance line.
    pub fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, &format!("{}{body}", self.header))
    }

    pub fn json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &(text + "\n"))
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }
}
