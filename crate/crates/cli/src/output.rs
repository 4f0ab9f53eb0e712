//! Artifact writers. CSV: header row, '.' decimals, LF endings, shortest
//! round-trip float formatting. JSON: pretty-printed with a trailing newline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::config(format!("cannot serialize {name}: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Buffered CSV table; cells are already formatted.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, dir: &Path, name: &str) -> CliResult<PathBuf> {
        let path = dir.join(name);
        let err = |e: csv::Error| CliError::config(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(err)?;
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Rust's `Display` for floats is locale independent and round-trips.
pub fn num(x: f64) -> String {
    format!("{x}")
}
