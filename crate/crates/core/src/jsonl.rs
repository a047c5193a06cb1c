//! Header-prefixed JSON Lines files.
//!
//! Every interchange file starts with `{"schema": <name>, "version": 1}` and
//! continues with one record per line. Blank lines are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub const DATASET: &str = "refmatch.dataset";
pub const CANDIDATES: &str = "refmatch.candidates";
pub const EMBEDDINGS: &str = "refmatch.embeddings";
pub const PREDICTIONS: &str = "refmatch.predictions";
pub const GROUND_TRUTH: &str = "refmatch.groundtruth";
pub const SCORES: &str = "refmatch.scores";
pub const SELECTIONS: &str = "refmatch.selections";
pub const ASSIGNMENTS: &str = "refmatch.assignments";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// A parsed record together with its 1-based line number.
#[derive(Debug, Clone)]
pub struct Located<T> {
    pub line: usize,
    pub record: T,
}

pub fn read_path<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<Located<T>>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read(BufReader::new(file), &path.display().to_string(), schema)
}

pub fn read<R: BufRead, T: DeserializeOwned>(
    reader: R,
    source: &str,
    schema: &str,
) -> Result<Vec<Located<T>>> {
    let err = |line: usize, message: String| Error::Validation {
        path: source.to_string(),
        line,
        message,
    };
    let mut header_seen = false;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| err(line_no, format!("bad header record: {e}")))?;
            if header.schema != schema {
                return Err(err(
                    line_no,
                    format!("schema {:?}, expected {schema:?}", header.schema),
                ));
            }
            if header.version != VERSION {
                return Err(err(
                    line_no,
                    format!("schema version {}, expected {VERSION}", header.version),
                ));
            }
            header_seen = true;
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| err(line_no, e.to_string()))?;
        records.push(Located {
            line: line_no,
            record,
        });
    }
    if !header_seen {
        return Err(err(0, "missing header record".into()));
    }
    Ok(records)
}

pub fn write<W: Write, T: Serialize>(
    mut out: W,
    schema: &str,
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &Header {
            schema: schema.to_string(),
            version: VERSION,
        },
    )?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_string<T: Serialize>(schema: &str, records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut buf = Vec::new();
    write(&mut buf, schema, records)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}
