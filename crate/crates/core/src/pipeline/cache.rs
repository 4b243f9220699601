//! Content fingerprints and per-stage input digests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

/// Bumped whenever any artifact layout changes.
pub const ARTIFACT_VERSION: u32 = 1;

pub const STAGE_DIR: &str = ".stages";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path, what: &str) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::MissingInput {
        what: what.to_string(),
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(sha256_hex(&bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .expect("walk stays under root")
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}

fn relative_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Digest of every file under `dir`, keyed by `/`-separated relative path so
/// it does not depend on where the directory lives.
pub fn dir_digest(dir: &Path, what: &str) -> Result<String, PipelineError> {
    let missing = |e: std::io::Error| PipelineError::MissingInput {
        what: what.to_string(),
        path: dir.to_path_buf(),
        reason: e.to_string(),
    };
    if !dir.is_dir() {
        return Err(missing(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "not a directory",
        )));
    }
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files).map_err(missing)?;
    let mut keyed: Vec<(String, PathBuf)> =
        files.into_iter().map(|p| (relative_key(&p), p)).collect();
    keyed.sort();
    let mut h = Sha256::new();
    for (key, rel) in keyed {
        let bytes = fs::read(dir.join(&rel)).map_err(missing)?;
        h.update(key.as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

/// Accumulates labelled inputs into one stage digest.
#[derive(Debug, Default)]
pub struct DigestBuilder {
    parts: BTreeMap<String, String>,
}

impl DigestBuilder {
    pub fn new(stage: &str) -> Self {
        let mut b = Self::default();
        b.add("stage", stage);
        b.add("artifact_version", &ARTIFACT_VERSION.to_string());
        b.add("tool_version", env!("CARGO_PKG_VERSION"));
        b
    }

    pub fn add(&mut self, label: &str, value: &str) -> &mut Self {
        self.parts.insert(label.to_string(), value.to_string());
        self
    }

    pub fn add_json<T: Serialize>(&mut self, label: &str, value: &T) -> &mut Self {
        let json = serde_json::to_string(value).expect("config values serialize");
        self.add(label, &json)
    }

    pub fn finish(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.parts {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// What a completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_digest: String,
    /// Output path relative to the output directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn record_path(output_dir: &Path, stage: &str) -> PathBuf {
    output_dir.join(STAGE_DIR).join(format!("{stage}.json"))
}

/// True when the last run of `stage` had the same input digest and its
/// outputs are still intact.
pub fn is_fresh(output_dir: &Path, stage: &str, input_digest: &str) -> bool {
    let Ok(raw) = fs::read(record_path(output_dir, stage)) else {
        return false;
    };
    let Ok(rec) = serde_json::from_slice::<StageRecord>(&raw) else {
        return false;
    };
    rec.input_digest == input_digest
        && rec
            .outputs
            .iter()
            .all(|(rel, sha)| fs::read(output_dir.join(rel)).is_ok_and(|b| &sha256_hex(&b) == sha))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Writes the stage outputs, then the record that vouches for them.
pub fn commit_stage(
    output_dir: &Path,
    stage: &str,
    input_digest: &str,
    outputs: &[(String, Vec<u8>)],
) -> Result<(), PipelineError> {
    let mut hashes = BTreeMap::new();
    for (rel, bytes) in outputs {
        write_atomic(&output_dir.join(rel), bytes)?;
        hashes.insert(rel.clone(), sha256_hex(bytes));
    }
    let rec = StageRecord {
        stage: stage.to_string(),
        input_digest: input_digest.to_string(),
        outputs: hashes,
    };
    let mut json = serde_json::to_vec_pretty(&rec).expect("stage record serializes");
    json.push(b'\n');
    write_atomic(&record_path(output_dir, stage), &json)
}
