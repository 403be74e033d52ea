//! Run directory layout: CSV files start with a `#` header block, JSON
//! records are wrapped with the same metadata.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qramp_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const TOOL: &str = "qramp";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub meta: Meta,
    pub record: T,
}

pub struct RunDir {
    dir: PathBuf,
    meta: Meta,
}

impl RunDir {
    pub fn create(dir: &Path, config_sha256: String, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let meta = Meta {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_sha256,
            seed,
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` with the header block, then whatever `body` emits.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# {} {}", self.meta.tool, self.meta.version)?;
        writeln!(w, "# config_sha256 {}", self.meta.config_sha256)?;
        writeln!(w, "# seed {}", self.meta.seed)?;
        body(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&self, name: &str, record: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let env = Envelope {
            meta: self.meta.clone(),
            record,
        };
        let mut text =
            serde_json::to_string_pretty(&env).map_err(|e| Error::Numerical(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Reads a record written by [`RunDir::json`]; a bare record is accepted too.
pub fn read_record<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read record {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let inner = match value {
        serde_json::Value::Object(mut m) if m.contains_key("meta") && m.contains_key("record") => {
            m.remove("record").expect("checked")
        }
        other => other,
    };
    T::deserialize(inner).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
