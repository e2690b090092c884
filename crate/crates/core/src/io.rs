//! File helpers: atomic writes, JSON-lines, content hashing.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `contents` to a temp file next to `path` and renames it into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> io::Result<()> {
    let bytes = to_jsonl(records).map_err(io::Error::other)?;
    atomic_write(path, &bytes)
}

/// One parsed line of a JSON-lines file; `index` counts non-blank lines from 0.
pub struct JsonlRecord<T> {
    pub index: usize,
    pub value: Result<T, serde_json::Error>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<JsonlRecord<T>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(JsonlRecord {
            index,
            value: serde_json::from_str(&line),
        });
        index += 1;
    }
    Ok(out)
}

/// Reads a JSON-lines file, failing on the first malformed record.
pub fn read_jsonl_strict<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    read_jsonl(path)?
        .into_iter()
        .map(|r| {
            r.value.map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: record {}: {e}", path.display(), r.index),
                )
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
