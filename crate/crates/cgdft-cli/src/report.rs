//! Render the artifacts of a previous run as plain-text tables. The CSV
//! files are the plot data; this view only aligns them for reading and
//! restates the recorded verdict.

use std::fmt::Write as _;
use std::path::Path;

use cgdft::io;

#[derive(Debug)]
pub enum ReportError {
    Io(std::io::Error),
    Corrupt(String),
    Empty(std::path::PathBuf),
}

impl std::fmt::Display for ReportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReportError::Io(e) => write!(f, "cannot read artifacts: {e}"),
            ReportError::Corrupt(msg) => write!(f, "corrupt artifact: {msg}"),
            ReportError::Empty(dir) => {
                write!(f, "no run artifacts found in {}", dir.display())
            }
        }
    }
}

impl From<std::io::Error> for ReportError {
    fn from(e: std::io::Error) -> Self {
        ReportError::Io(e)
    }
}

/// Shorten 17-significant-digit artifact floats for the human view; the
/// full-precision values stay in the CSV.
fn display_cell(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(x) if cell.contains('e') || cell.contains('.') => format!("{x:.6e}"),
        _ => cell.to_string(),
    }
}

fn render_table(name: &str, columns: &[String], rows: &[Vec<String>]) -> String {
    let mut cells: Vec<Vec<String>> = vec![columns.to_vec()];
    cells.extend(rows.iter().map(|r| r.iter().map(|c| display_cell(c)).collect()));
    let width = columns.len();
    let mut widths = vec![0usize; width];
    for row in &cells {
        for (i, c) in row.iter().enumerate().take(width) {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "## {name}");
    for (r, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if r == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
        }
    }
    out
}

/// Read a run directory and produce the plain-text report: metadata line,
/// one aligned table per CSV artifact, and the recorded verdict.
pub fn render(dir: &Path) -> Result<String, ReportError> {
    if !dir.is_dir() {
        return Err(ReportError::Empty(dir.to_path_buf()));
    }
    let mut csvs: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    csvs.sort();
    let verdict_path = dir.join("verdict.json");
    if csvs.is_empty() && !verdict_path.exists() {
        return Err(ReportError::Empty(dir.to_path_buf()));
    }

    let mut out = String::new();
    let meta_path = dir.join("run_metadata.json");
    if meta_path.exists() {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| ReportError::Corrupt(format!("run_metadata.json: {e}")))?;
        let experiment = meta
            .get("experiment")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown");
        let seed = meta
            .pointer("/config/seed")
            .map(|v| v.to_string())
            .unwrap_or_else(|| "?".to_string());
        let _ = writeln!(out, "experiment: {experiment} (seed {seed})\n");
    }

    for path in &csvs {
        let (columns, rows) = io::read_table(path)
            .map_err(|e| ReportError::Corrupt(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("table");
        out.push_str(&render_table(name, &columns, &rows));
        out.push('\n');
    }

    if verdict_path.exists() {
        let verdict: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&verdict_path)?)
                .map_err(|e| ReportError::Corrupt(format!("verdict.json: {e}")))?;
        if let Some(checks) = verdict.get("checks").and_then(|c| c.as_array()) {
            for check in checks {
                let _ = writeln!(
                    out,
                    "{}  {}  {}",
                    if check.get("passed").and_then(|p| p.as_bool()).unwrap_or(false) {
                        "PASS"
                    } else {
                        "FAIL"
                    },
                    check.get("name").and_then(|n| n.as_str()).unwrap_or("?"),
                    check.get("detail").and_then(|d| d.as_str()).unwrap_or("")
                );
            }
        }
        let passed = verdict
            .get("passed")
            .and_then(|p| p.as_bool())
            .ok_or_else(|| ReportError::Corrupt("verdict.json lacks `passed`".to_string()))?;
        let _ = writeln!(out, "verdict: {}", if passed { "PASS" } else { "FAIL" });
    }
    Ok(out)
}
