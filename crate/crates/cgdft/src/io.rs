//! Deterministic artifacts: fixed-format CSV tables, JSON sidecars and
//! atomic file writes.
//!
//! Every float is emitted with 17 significant digits and a `.` decimal
//! point, independent of locale, so re-running an experiment with the same
//! configuration and seed reproduces each artifact byte for byte. Files are
//! written to a temporary name in the target directory and renamed into
//! place, so readers never observe a half-written artifact.

use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("artifact path has no parent directory: {0}")]
    NoParent(PathBuf),
}

/// Shortest representation that round-trips the exact bit pattern: 17
/// significant digits in scientific notation. Negative zero, infinities and
/// NaN all map to fixed strings.
pub fn format_float(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Integers never need the float treatment.
pub fn format_int(i: i64) -> String {
    format!("{i}")
}

/// One named CSV table: a header row and data rows of pre-formatted cells.
#[derive(Debug, Clone, Serialize)]
pub struct Table {
    /// File stem; the artifact lands at `<dir>/<name>.csv`.
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append one row; the cell count must match the header.
    pub fn push(&mut self, cells: Vec<String>) {
        assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width mismatch in table {}",
            self.name
        );
        self.rows.push(cells);
    }

    /// The CSV body: header line plus one line per row, `\n` endings, no
    /// quoting (cells are numbers or simple identifiers by construction).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            debug_assert!(row.iter().all(|c| !c.contains([',', '\n', '"'])));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Write bytes to `path` atomically: temp file in the same directory,
/// flushed, then renamed over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| IoError::NoParent(path.to_path_buf()))?;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

/// Write a table as `<dir>/<name>.csv` and return the path.
pub fn write_table(dir: &Path, table: &Table) -> Result<PathBuf, IoError> {
    let path = dir.join(format!("{}.csv", table.name));
    write_atomic(&path, table.to_csv().as_bytes())?;
    Ok(path)
}

/// Write any serializable value as pretty JSON at `<dir>/<name>.json`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, IoError> {
    let path = dir.join(format!("{name}.json"));
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Read a previously written table back as (columns, rows); used by the
/// report command and by reproducibility comparisons.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), IoError> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines();
    let columns: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((columns, rows))
}
