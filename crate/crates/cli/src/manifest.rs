use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Record written beside every command's outputs. Contains nothing
/// time- or host-dependent, so equal inputs give byte-equal manifests.
#[derive(Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Effective settings as `(key, value)` in insertion order.
    pub config: Vec<(String, String)>,
    artifacts: Vec<(PathBuf, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    /// Writes `bytes` to `path` and records its digest.
    pub fn write_artifact(&mut self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        self.record(path, bytes);
        Ok(())
    }

    /// Records an artifact written elsewhere.
    pub fn record_file(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = fs::read(path)?;
        self.record(path, &bytes);
        Ok(())
    }

    fn record(&mut self, path: &Path, bytes: &[u8]) {
        self.artifacts.push((path.to_path_buf(), hex::encode(Sha256::digest(bytes))));
    }

    /// Artifact paths under `base` are written relative to it.
    pub fn render(&self, base: &Path) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config {k} = {v}");
        }
        for (p, h) in &self.artifacts {
            let shown = p.strip_prefix(base).unwrap_or(p);
            let _ = writeln!(out, "artifact {} sha256={h}", shown.display());
        }
        out
    }

    /// Saves to `<dir>/<command>.manifest`.
    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.manifest", self.command));
        fs::write(&path, self.render(dir))?;
        Ok(path)
    }
}
