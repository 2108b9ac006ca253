//! Metric rows, their CSV and JSON-lines files, and the run manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Column order of every metrics CSV.
pub const CSV_HEADER: &str =
    "run_id,users,overlap,snr_db,channel,payload_symbols,baseline_symbols,sideinfo_bytes,savings_ratio,accuracy,semantic_mse,seed";

/// One simulated run. `snr_db` is empty for the noiseless channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub users: usize,
    pub overlap: f64,
    pub snr_db: Option<f64>,
    pub channel: String,
    pub payload_symbols: usize,
    pub baseline_symbols: usize,
    pub sideinfo_bytes: usize,
    pub savings_ratio: f64,
    pub accuracy: f64,
    pub semantic_mse: f64,
    pub seed: u64,
}

impl MetricsRow {
    /// Payload at 4 bytes per symbol plus side information.
    pub fn total_bytes(&self) -> usize {
        4 * self.payload_symbols + self.sideinfo_bytes
    }

    /// The baseline carries the same side information.
    pub fn baseline_total_bytes(&self) -> usize {
        4 * self.baseline_symbols + self.sideinfo_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        bail!("{}: unexpected metrics header", path.display());
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn write_jsonl(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(rows)
}

/// Hex SHA-256 of the configuration's canonical JSON form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sweep: String,
    pub config_sha256: String,
    pub master_seed: u64,
    /// Every run seed, in row order.
    pub seeds: Vec<u64>,
    pub rows: usize,
    pub files: Vec<ManifestFile>,
}

/// Writes `<stem>.csv`, `<stem>.jsonl` and `<stem>.manifest.json` under
/// `dir` and returns their paths. Rows are written in the given order.
pub fn emit_metrics(dir: &Path, stem: &str, rows: &[MetricsRow], cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("no metric rows to write for {stem}");
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for fmt in [Format::Csv, Format::JsonLines] {
        let name = format!("{stem}.{}", fmt.extension());
        let path = dir.join(&name);
        match fmt {
            Format::Csv => write_csv(&path, rows)?,
            Format::JsonLines => write_jsonl(&path, rows)?,
        }
        entries.push(ManifestFile {
            sha256: file_sha256(&path)?,
            name,
        });
        files.push(path);
    }
    let manifest = Manifest {
        sweep: stem.to_string(),
        config_sha256: config_hash(cfg),
        master_seed: cfg.seed,
        seeds: rows.iter().map(|r| r.seed).collect(),
        rows: rows.len(),
        files: entries,
    };
    let path = dir.join(format!("{stem}.manifest.json"));
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    files.push(path);
    Ok(files)
}
