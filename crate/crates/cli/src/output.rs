use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use spikemix::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that stages every file under a temporary name and
/// renames it into place once fully written.
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.root.join(name);
        let tmp = self
            .root
            .join(format!(".{name}.{}.tmp", std::process::id()));
        let staged = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        if let Err(e) = staged {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Render through a writer callback into memory, then stage atomically.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.written
    }
}

#[derive(Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: the exact inputs, the effective
/// settings after command-line overrides and hashes of what was produced.
#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config_sha256: Option<String>,
    pub inputs: Vec<InputRecord>,
    pub effective_settings: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
}
