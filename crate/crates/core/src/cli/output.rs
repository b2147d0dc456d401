//! Result files: CSV tables and a JSON run manifest.
//!
//! Every CSV starts with one `#` comment line carrying the configuration
//! hash and the column units. No timestamps or host details are written, so
//! a rerun with the same configuration reproduces every byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: &'a str,
    version: &'a str,
    files: &'a BTreeMap<String, String>,
    summary: &'a serde_json::Value,
}

/// Output directory of one run.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    /// Writes a table. `units` describes the columns in words.
    pub fn write_csv<S: AsRef<str>>(
        &mut self,
        name: &str,
        units: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<S>>,
    ) -> Result<PathBuf> {
        let mut buf = format!("# config_sha256={} units: {}\n", self.config_hash, units).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let csv_err = |e: csv::Error| Error::Numerical(format!("csv encoding failed: {e}"));
            w.write_record(header).map_err(csv_err)?;
            for row in rows {
                w.write_record(row.iter().map(|s| s.as_ref())).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Numerical(format!("csv encoding failed: {e}")))?;
        }
        self.write_bytes(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("result serializes");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `manifest.json` listing every file written so far with its
    /// SHA-256.
    pub fn finish(self, command: &str, seed: u64, summary: serde_json::Value) -> Result<PathBuf> {
        let manifest = Manifest {
            command,
            seed,
            config_sha256: &self.config_hash,
            version: env!("CARGO_PKG_VERSION"),
            files: &self.files,
            summary: &summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}
