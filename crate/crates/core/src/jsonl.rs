//! Line-oriented JSON files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    /// Every malformed line, 1-based.
    #[error("{path}: {} malformed line(s), first at line {}: {}", .errors.len(), .errors[0].0, .errors[0].1)]
    Schema { path: String, errors: Vec<(usize, String)> },
}

/// Reads every line, collecting all schema violations before failing.
/// Blank lines are skipped.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let io = |source| JsonlError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(JsonlError::Schema { path: path.display().to_string(), errors })
    }
}

pub fn write<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
