//! Output files. Every CSV begins with a `# config_hash: <hex>` line followed
//! by a header row; floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest decimal that round-trips; empty for missing values.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// An in-memory CSV table.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self, config_hash: &str) -> Result<Vec<u8>, CliError> {
        let mut out = format!("# config_hash: {config_hash}\n").into_bytes();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    }
}

/// Periods written to a curve file: every `stride`-th one plus the last.
pub fn sampled_periods(horizon: usize, stride: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=horizon).filter(|t| t % stride == 0).collect();
    if ts.last() != Some(&horizon) {
        ts.push(horizon);
    }
    ts
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub artifact_version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed_base: u64,
    pub horizon: usize,
    pub n_paths: usize,
    pub policies: Vec<String>,
    /// SHA-256 of each data file, by file name.
    pub files: BTreeMap<String, String>,
}

/// Collects files for one command and writes them with a manifest.
pub struct OutputDir {
    dir: PathBuf,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let bytes = table.to_bytes(&self.config_hash)?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn finish(self, command: &str, seed_base: u64, horizon: usize, n_paths: usize, policies: Vec<String>) -> Result<(), CliError> {
        let manifest = Manifest {
            artifact_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed_base,
            horizon,
            n_paths,
            policies,
            files: self.files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1e-300, -765.1899999999, 3.0, f64::MAX] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt_num(None), "");
    }

    #[test]
    fn table_starts_with_hash_line() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        let text = String::from_utf8(t.to_bytes("abc").unwrap()).unwrap();
        assert_eq!(text, "# config_hash: abc\na,b\n1,\"x,y\"\n");
    }

    #[test]
    fn stride_keeps_last_period() {
        assert_eq!(sampled_periods(7, 3), vec![3, 6, 7]);
        assert_eq!(sampled_periods(6, 3), vec![3, 6]);
        assert_eq!(sampled_periods(3, 1), vec![1, 2, 3]);
    }
}
