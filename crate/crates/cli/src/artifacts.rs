//! Output directory handling: CSV tables, the run manifest and checkpoints.

use crate::error::{CliError, CliResult};
use serde::Serialize;
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

pub const RESULTS: &str = "results.csv";
pub const HISTORY: &str = "history.csv";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.json";

/// Scientific notation with `precision` digits after the point.
pub fn fmt_float(v: f64, precision: usize) -> String {
    format!("{v:.precision$e}")
}

/// A CSV table built row by row.
#[derive(Debug, Clone)]
pub struct Table {
    precision: usize,
    text: String,
}

pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

impl Table {
    pub fn new(header: &[&str], precision: usize) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { precision, text }
    }

    pub fn row(&mut self, cells: impl IntoIterator<Item = Cell>) {
        let parts: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::Float(v) => fmt_float(v, self.precision),
                Cell::Int(v) => v.to_string(),
                Cell::Text(s) => s,
                Cell::Empty => String::new(),
            })
            .collect();
        self.text.push_str(&parts.join(","));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Diverged,
    Failed,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub status: Status,
    pub seed: u64,
    pub precision: usize,
    pub output_dir: String,
    pub params: Value,
    pub metrics: Map<String, Value>,
    pub files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The output directory of one run; remembers every file written.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Resolves a relative path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| sciml_core::Error::Serialization(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn files(&self) -> Vec<String> {
        let mut f = self.files.clone();
        f.push(MANIFEST.to_string());
        f
    }
}

/// Metric map builder with insertion through `serde_json::json!`-compatible values.
#[derive(Debug, Default)]
pub struct Metrics(pub Map<String, Value>);

impl Metrics {
    pub fn set(&mut self, key: &str, v: impl Serialize) {
        let value = serde_json::to_value(v).unwrap_or(Value::Null);
        self.0.insert(key.to_string(), value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_formats_cells() {
        let mut t = Table::new(&["i", "x", "note", "v"], 3);
        t.row([Cell::from(2usize), Cell::from(0.5), Cell::from("a"), Cell::from(None)]);
        assert_eq!(t.into_string(), "i,x,note,v\n2,5.000e-1,a,\n");
    }
}
