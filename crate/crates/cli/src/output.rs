//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Collects the files written by a run.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            files: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn seed(&mut self, role: &str, seed: u64) {
        self.seeds.insert(role.to_string(), seed);
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
        self.text(name, &(text + "\n"))
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes through `f` into an in-memory buffer, then to `name`.
    pub fn with_writer<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> snmm::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        fs::write(self.path(name), buf)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json`: config echo, seeds, versions and outputs.
    pub fn finish(mut self, cfg: &RunConfig) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "config": cfg,
            "seeds": self.seeds,
            "versions": {
                "snmm": snmm::VERSION,
                "snmm-cli": env!("CARGO_PKG_VERSION"),
            },
            "outputs": self.files,
        });
        self.files = Vec::new();
        self.json("manifest.json", &manifest)
    }
}
