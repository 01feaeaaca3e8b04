//! One QA per line: `question`, `answer`, `level`, `category`, `provenance`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::QAPair;
use crate::error::{Error, Result};

pub fn to_jsonl(pairs: &[QAPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("QA pairs serialize"));
        out.push('\n');
    }
    out
}

/// Writes `pairs` to `path` and returns the number of lines.
pub fn emit_jsonl(pairs: &[QAPair], path: &Path) -> Result<usize> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(pairs).as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(pairs.len())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let qa = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!(
                "{} line {} column {}: {e}",
                path.display(),
                i + 1,
                e.column()
            ))
        })?;
        out.push(qa);
    }
    Ok(out)
}
