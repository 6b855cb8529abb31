//! Self-describing artifacts: every output carries the tool version, a hash of
//! the resolved configuration and the seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Metadata {
    pub fn for_config(config: &impl Serialize, seed: Option<u64>) -> Result<Self, CliError> {
        let bytes = serde_json::to_vec(config)?;
        Ok(Self {
            tool: "specgram",
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex::encode(Sha256::digest(&bytes)),
            seed,
        })
    }

    fn csv_header(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!(
            "# {} {}\n# config_sha256 {}\n# seed {seed}\n",
            self.tool, self.version, self.config_sha256
        )
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|source| CliError::Io { path: path.display().to_string(), source }),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|source| CliError::Io { path: "stdout".into(), source }),
    }
}

/// Writes `{"metadata": ..., "result": ...}`.
pub fn write_json(out: Option<&Path>, meta: &Metadata, result: &impl Serialize) -> Result<(), CliError> {
    let doc = serde_json::json!({ "metadata": meta, "result": result });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    emit(out, text.as_bytes())
}

/// Writes the metadata comment block followed by a CSV body.
pub fn write_csv(out: Option<&Path>, meta: &Metadata, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    let body = writer.into_inner().map_err(|e| CliError::Config(format!("CSV buffer: {e}")))?;
    let mut bytes = meta.csv_header().into_bytes();
    bytes.extend_from_slice(&body);
    emit(out, &bytes)
}

/// `out.csv` → `out.summary.json`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

/// Shortest round-trip representation of a float.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
