//! Results directory: atomic writes, content hashes and CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seventeen significant digits: enough for an exact round trip.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with a header line and one row per record.
pub fn csv(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Header and numeric rows of a CSV written by [`csv`].
pub fn parse_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if row.len() != header.len() {
            return Err(CliError::Config(format!("{} line {}: wrong field count", path.display(), i + 2)));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub core_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// File name (or path, for inputs outside the archive) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// `OK` or `FAILED(<stage>)`.
    pub status: String,
}

/// Archive directory plus the bookkeeping for its manifest.
pub struct Archive {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Archive {
    /// Refuses an existing archive unless `force` is set.
    pub fn open(dir: &Path, force: bool, manifest: Manifest) -> CliResult<Self> {
        if dir.join(MANIFEST).exists() && !force {
            return Err(CliError::Refused(dir.to_path_buf()));
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path(name), bytes)?;
        self.manifest.outputs.insert(name.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    /// Reads an artifact produced by an earlier run and records it as an input.
    pub fn read(&mut self, name: &str) -> CliResult<Vec<u8>> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.manifest.inputs.insert(name.to_owned(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn finish(&mut self, status: String) -> CliResult<()> {
        self.manifest.status = status;
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path(MANIFEST), &json)
    }
}
