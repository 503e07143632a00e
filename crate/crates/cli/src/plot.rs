//! Plot-ready series files: tab-separated values with `#` metadata lines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[cfg(test)]
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub run_config_hash: String,
    pub checkpoint_hash: String,
    pub columns: Vec<String>,
    /// First column of every row.
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: &str, run_config_hash: &str, checkpoint_hash: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            run_config_hash: run_config_hash.into(),
            checkpoint_hash: checkpoint_hash.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            labels: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.labels.push(label.into());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# series {}", self.name);
        let _ = writeln!(out, "# run_config_hash {}", self.run_config_hash);
        let _ = writeln!(out, "# checkpoint_hash {}", self.checkpoint_hash);
        let _ = writeln!(out, "label\t{}", self.columns.join("\t"));
        for (label, row) in self.labels.iter().zip(&self.rows) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{label}\t{}", cells.join("\t"));
        }
        out
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let err = |line: usize, msg: String| CliError::new("parse", format!("line {line}: {msg}"));
        let mut s = Series::new("", "", "", &[]);
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once(' ').unwrap_or((meta, ""));
                match key {
                    "series" => s.name = value.into(),
                    "run_config_hash" => s.run_config_hash = value.into(),
                    "checkpoint_hash" => s.checkpoint_hash = value.into(),
                    _ => return Err(err(n, format!("unknown metadata key {key:?}"))),
                }
                continue;
            }
            let mut cells = line.split('\t');
            let first = cells.next().unwrap_or_default();
            if !header {
                if first != "label" {
                    return Err(err(n, "expected the column header".into()));
                }
                s.columns = cells.map(String::from).collect();
                header = true;
                continue;
            }
            let row = cells.map(|c| c.parse::<f64>().map_err(|e| err(n, format!("{c:?}: {e}")))).collect::<Result<Vec<f64>, _>>()?;
            if row.len() != s.columns.len() {
                return Err(err(n, format!("{} values for {} columns", row.len(), s.columns.len())));
            }
            s.labels.push(first.into());
            s.rows.push(row);
        }
        if !header {
            return Err(err(text.lines().count().max(1), "no column header".into()));
        }
        Ok(s)
    }
}
