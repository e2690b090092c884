//! `manifest.json` in the output dir records, per stage, the configuration
//! hash it ran under and the digest of every file it wrote. Downstream stages
//! use it to detect missing or stale inputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Output path relative to the output dir -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Result<Self, CliError> {
        let path = out_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("corrupt {}: {e}", path.display())))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        frase::io::atomic_write(&out_dir.join(MANIFEST), &bytes)
            .map_err(|e| CliError::input(format!("cannot write manifest: {e}")))
    }

    /// Checks that `stage` ran under `expected` and that its outputs are
    /// still on disk unchanged.
    pub fn require(&self, out_dir: &Path, stage: &str, expected: &str) -> Result<&StageRecord, CliError> {
        let rec = self.stages.get(stage).ok_or_else(|| {
            CliError::input(format!(
                "missing upstream artifact: stage `{stage}` has not been run in {} (run `frase {stage}`)",
                out_dir.display()
            ))
        })?;
        if rec.config_hash != expected {
            return Err(CliError::input(format!(
                "stale pipeline: stage `{stage}` was produced under a different configuration or input (rerun `frase {stage}`)"
            )));
        }
        for (rel, digest) in &rec.outputs {
            let path = out_dir.join(rel);
            match frase::io::sha256_file(&path) {
                Ok(d) if &d == digest => {}
                Ok(_) => {
                    return Err(CliError::input(format!(
                        "stale pipeline: {rel} from stage `{stage}` was modified (rerun `frase {stage}`)"
                    )))
                }
                Err(_) => {
                    return Err(CliError::input(format!(
                        "missing upstream artifact: {rel} from stage `{stage}` (rerun `frase {stage}`)"
                    )))
                }
            }
        }
        Ok(rec)
    }
}

/// sha256 of the compact JSON encoding; object keys are sorted, so equal
/// values always hash equally.
pub fn hash_value(v: &Value) -> String {
    frase::io::sha256_hex(&serde_json::to_vec(v).expect("json value serializes"))
}

/// Digest of a file, or of a directory's files (names and contents).
pub fn input_digest(path: &Path) -> Result<String, CliError> {
    let err = |e: std::io::Error| CliError::input(format!("cannot read {}: {e}", path.display()));
    if path.is_dir() {
        let mut names: Vec<(String, String)> = Vec::new();
        for entry in std::fs::read_dir(path).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_file() {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                names.push((name, frase::io::sha256_file(&p).map_err(err)?));
            }
        }
        names.sort();
        Ok(hash_value(&serde_json::json!(names)))
    } else {
        frase::io::sha256_file(path).map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn require_reports_missing_stale_and_modified() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        assert!(m.require(dir.path(), "split", "h").unwrap_err().message.contains("`split`"));
        std::fs::write(dir.path().join("a.json"), b"{}").unwrap();
        m.stages.insert(
            "split".into(),
            StageRecord {
                config_hash: "h".into(),
                outputs: BTreeMap::from([("a.json".into(), frase::io::sha256_hex(b"{}"))]),
                summary: Value::Null,
            },
        );
        assert!(m.require(dir.path(), "split", "h").is_ok());
        assert!(m.require(dir.path(), "split", "other").unwrap_err().message.contains("stale"));
        std::fs::write(dir.path().join("a.json"), b"[]").unwrap();
        assert!(m.require(dir.path(), "split", "h").unwrap_err().message.contains("modified"));
        std::fs::remove_file(dir.path().join("a.json")).unwrap();
        assert!(m.require(dir.path(), "split", "h").unwrap_err().message.contains("missing"));
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn value_hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(hash_value(&a), hash_value(&b));
    }
}
