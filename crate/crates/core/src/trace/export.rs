// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heatmap CSV files and their JSON sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NoiseSpec, TraceSummary};
use crate::error::{Error, Result};

/// Run-level facts written next to a heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub ate: f64,
    pub n_total: usize,
    pub n_retained: usize,
    pub n_layers: usize,
    pub noise: NoiseSpec,
    /// Seed of the sample selection.
    pub sample_seed: u64,
    pub bucket_counts: Vec<(String, usize)>,
}

/// A parsed heatmap: one labelled row of per-layer values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    pub key: String,
    pub layers: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
}

fn table_csv(key: &str, n_layers: usize, rows: impl Iterator<Item = (String, Vec<f64>)>) -> String {
    let mut s = String::from(key);
    for l in 1..=n_layers {
        let _ = write!(s, ",{l}");
    }
    s.push('\n');
    for (name, values) in rows {
        s.push_str(&name);
        for v in values {
            // shortest representation that parses back to the same bits
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Path of the by-position table written beside `path`.
pub fn positions_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    path.with_file_name(format!("{stem}.positions.csv"))
}

/// Writes the role-bucket heatmap to `path`, the by-position heatmap
/// (1-based positions) beside it, and the sidecar at `path` with a `.json`
/// extension. Returns the three paths.
pub fn export_heatmap(summary: &TraceSummary, noise: &NoiseSpec, sample_seed: u64, path: &Path) -> Result<[PathBuf; 3]> {
    if summary.by_bucket.is_empty() {
        return Err(Error::Tracing("empty summary".into()));
    }
    let buckets = summary.by_bucket.iter().map(|r| (r.key.name().to_string(), r.aie.clone()));
    write(path, &table_csv("bucket", summary.n_layers, buckets))?;
    let pos_path = positions_path(path);
    let positions = summary.by_position.iter().map(|r| ((r.key + 1).to_string(), r.aie.clone()));
    write(&pos_path, &table_csv("position", summary.n_layers, positions))?;
    let sidecar = TraceSidecar {
        ate: summary.ate,
        n_total: summary.n_total,
        n_retained: summary.n_retained,
        n_layers: summary.n_layers,
        noise: *noise,
        sample_seed,
        bucket_counts: summary.by_bucket.iter().map(|r| (r.key.name().to_string(), r.count)).collect(),
    };
    let json_path = path.with_extension("json");
    write(&json_path, &serde_json::to_string_pretty(&sidecar)?)?;
    Ok([path.to_path_buf(), pos_path, json_path])
}

pub fn read_heatmap(path: &Path) -> Result<HeatmapTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::Data(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let mut cols = header.split(',');
    let key = cols.next().unwrap_or_default().to_string();
    let layers = cols
        .map(|c| c.parse::<usize>().map_err(|_| bad(1, "layer header is not an integer")))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let name = cells.next().unwrap_or_default().to_string();
        let values = cells
            .map(|c| c.parse::<f64>().map_err(|_| bad(k + 2, "value is not a number")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != layers.len() {
            return Err(bad(k + 2, "wrong number of columns"));
        }
        rows.push((name, values));
    }
    Ok(HeatmapTable { key, layers, rows })
}
