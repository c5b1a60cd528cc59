use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: String,
    /// Metric name to value; AP, F1, TA and PA are percentages.
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(task: &str, seed: u64, config_digest: String) -> Self {
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            task: task.to_string(),
            metrics: BTreeMap::new(),
            threshold: None,
            seed,
            config_digest,
            notes: Vec::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn note(&mut self, text: impl Into<String>) -> &mut Self {
        self.notes.push(text.into());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Hex SHA-256 of a canonical config rendering.
pub fn config_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub movie_id: String,
    pub shot: usize,
    pub column: String,
    pub score: f64,
    pub label: Option<u8>,
}

/// `movie_id,shot,column,score,label` with a header line.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::from("movie_id,shot,column,score,label\n");
    for r in rows {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.movie_id, r.shot, r.column, r.score, label
        );
    }
    fs::write(path, out)?;
    Ok(())
}
