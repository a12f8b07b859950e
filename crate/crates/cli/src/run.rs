//! Run directories: every output goes through here so its hash lands in the
//! provenance record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    notes: &'a BTreeMap<String, String>,
}

pub struct RunDir {
    dir: Option<PathBuf>,
    command: &'static str,
    config: Option<RunConfig>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    notes: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunDir {
    /// Creates `dir` and writes `config.resolved` into it.
    pub fn create(dir: &Path, command: &'static str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = RunDir {
            dir: Some(dir.to_path_buf()),
            command,
            config: Some(config.clone()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        };
        run.write("config.resolved", config.to_toml().as_bytes())?;
        Ok(run)
    }

    /// A sink that records nothing, for commands run without `--out`.
    pub fn detached() -> Self {
        RunDir {
            dir: None,
            command: "",
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if self.dir.is_some() {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Records a file some library call already wrote into the run directory.
    pub fn output_existing(&mut self, name: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let h = sha256_file(&dir.join(name))?;
            self.outputs.insert(name.to_string(), h);
        }
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: String) {
        self.notes.insert(key.to_string(), value);
    }

    /// Writes `provenance.json`: command, resolved config, and the hashes of
    /// every input read and output written.
    pub fn finish(self) -> Result<()> {
        let (Some(dir), Some(config)) = (&self.dir, &self.config) else {
            return Ok(());
        };
        let p = Provenance {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            notes: &self.notes,
        };
        let mut json = serde_json::to_string_pretty(&p)?;
        json.push('\n');
        std::fs::write(dir.join("provenance.json"), json)?;
        Ok(())
    }
}
