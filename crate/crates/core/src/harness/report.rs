// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a results table: an edit configuration averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    /// `source->target` domain tags.
    pub pair: String,
    pub layers: Vec<usize>,
    pub policy: String,
    pub trainable: usize,
    pub trainable_fraction: f64,
    /// Mean test accuracy over seeds.
    pub mean: f64,
    /// Sample standard deviation, present with two or more seeds.
    pub std: Option<f64>,
    /// Mean accuracy on contrastive test sentences.
    pub contrastive_mean: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
}

const HEADER: [&str; 11] = [
    "experiment",
    "pair",
    "layers",
    "policy",
    "trainable",
    "trainable_fraction",
    "mean",
    "std",
    "contrastive_mean",
    "seeds",
    "accuracies",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn csv(rows: &[ReportRow]) -> String {
    let mut s = HEADER.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.pair,
            join(&r.layers),
            r.policy,
            r.trainable,
            r.trainable_fraction,
            r.mean,
            r.std.map(|v| v.to_string()).unwrap_or_default(),
            r.contrastive_mean,
            join(&r.seeds),
            join(&r.accuracies),
        );
    }
    s
}

/// Aligned plain-text table with accuracies in percent.
pub fn render_table(rows: &[ReportRow]) -> String {
    let head = ["experiment", "pair", "layers", "policy", "params", "fraction", "accuracy", "contrastive"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            let acc = match r.std {
                Some(sd) => format!("{:.1} ± {:.1}", 100.0 * r.mean, 100.0 * sd),
                None => format!("{:.1}", 100.0 * r.mean),
            };
            let layers = if r.layers.is_empty() {
                "-".to_string()
            } else {
                r.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            [
                r.experiment.clone(),
                r.pair.clone(),
                layers,
                r.policy.clone(),
                r.trainable.to_string(),
                format!("{:.4}%", 100.0 * r.trainable_fraction),
                acc,
                format!("{:.1}", 100.0 * r.contrastive_mean),
            ]
        })
        .collect();
    let mut width: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (k, (c, w)) in cells.iter().zip(&width).enumerate() {
            let pad = w - c.chars().count();
            // text columns left-aligned, numbers right-aligned
            if k < 4 {
                let _ = write!(s, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(s, "{}{c}", " ".repeat(pad));
            }
            if k + 1 < cells.len() {
                s.push_str("  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(head.to_vec());
    out.push_str(&line(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Writes `<name>.csv`, `<name>.txt` and `<name>.json` into `dir`.
pub fn write_report(rows: &[ReportRow], dir: &Path, name: &str) -> Result<[PathBuf; 3]> {
    let put = |ext: &str, text: String| -> Result<PathBuf> {
        let path = dir.join(format!("{name}.{ext}"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    Ok([
        put("csv", csv(rows))?,
        put("txt", render_table(rows))?,
        put("json", serde_json::to_string_pretty(rows)?)?,
    ])
}

/// Rows from a `.json` file written by [`write_report`].
pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
