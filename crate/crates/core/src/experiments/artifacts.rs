use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentError};

/// First 16 hex digits of the SHA-256 of the config's JSON form. The
/// output directory is not part of it.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut config = config.clone();
    config.out = None;
    let text = serde_json::to_string(&config).expect("configs serialize");
    hash_text(&text)
}

pub(crate) fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes artifacts into one directory, stamping each with the run's
/// config hash and seed.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
    hash: String,
    seed: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>, hash: impl Into<String>, seed: impl ToString) -> Result<Self, ExperimentError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(ExperimentError::io(&dir))?;
        Ok(Self {
            dir,
            hash: hash.into(),
            seed: seed.to_string(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// A writer for a subdirectory with the same stamp.
    pub fn child(&self, name: &str) -> Result<Self, ExperimentError> {
        Self::new(self.dir.join(name), self.hash.clone(), self.seed.clone())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn into_written(self) -> Vec<PathBuf> {
        self.written
    }

    pub fn absorb(&mut self, other: Artifacts) {
        self.written.extend(other.written);
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf, ExperimentError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(ExperimentError::io(&path))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn csv(&mut self, name: &str, body: &str) -> Result<PathBuf, ExperimentError> {
        let text = format!("# config_hash={} seed={}\n{body}", self.hash, self.seed);
        self.write(name, &text)
    }

    /// Serializes `value` (which must be a JSON object) with the stamp
    /// fields added.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, ExperimentError> {
        let mut v = serde_json::to_value(value).expect("artifact values serialize");
        let obj = v.as_object_mut().expect("artifact JSON is an object");
        obj.insert("config_hash".into(), self.hash.clone().into());
        let seed = self
            .seed
            .parse::<u64>()
            .map_or_else(|_| serde_json::Value::from(self.seed.clone()), serde_json::Value::from);
        obj.insert("seed".into(), seed);
        let mut text = serde_json::to_string_pretty(&v).expect("JSON values serialize");
        text.push('\n');
        self.write(name, &text)
    }
}
