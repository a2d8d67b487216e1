//! Line-delimited record files: one JSON object per example, tagged by
//! `"task"`. Field meanings are documented in the repository README.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::examples::{AeExample, AscExample};
use crate::error::{BatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Record {
    Ae(AeExample),
    Asc(AscExample),
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| BatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| BatError::io(path, e))?;
    }
    w.flush().map_err(|e| BatError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| BatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| BatError::Parse {
            line: i as u32 + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
