//! Offline backends: hashed bag-of-words embeddings and fixture replay for
//! chat completions.

use std::fs;
use std::io;
use std::path::PathBuf;

use super::cache::content_key;
use super::{BackendError, ChatBackend, ClientError, EmbeddingBackend, EmbeddingVector};
use crate::corpus::tokenize;

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Deterministic unit-norm embedding: token counts hashed into `dim` buckets.
pub fn stub_embed(text: &str, dim: usize) -> Result<EmbeddingVector, ClientError> {
    if dim == 0 {
        return Err(ClientError::InvalidVector(
            "dimension must be positive".into(),
        ));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(ClientError::EmptyText);
    }
    let mut counts = vec![0.0f64; dim];
    for tok in &tokens {
        counts[(fnv1a64(tok.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    let values = counts.into_iter().map(|c| c / norm).collect();
    Ok(EmbeddingVector {
        model_id: format!("stub-{dim}"),
        values,
    })
}

/// Embedding backend backed by [`stub_embed`]. A model id of the form
/// `stub-<dim>` selects that dimension; anything else uses `default_dim`.
#[derive(Debug, Clone)]
pub struct StubEmbeddingBackend {
    pub default_dim: usize,
}

impl StubEmbeddingBackend {
    pub fn new(default_dim: usize) -> Self {
        Self { default_dim }
    }

    pub fn dim_for(&self, model_id: &str) -> usize {
        model_id
            .strip_prefix("stub-")
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .unwrap_or(self.default_dim)
    }
}

impl EmbeddingBackend for StubEmbeddingBackend {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let dim = self.dim_for(model_id);
        texts
            .iter()
            .map(|t| {
                stub_embed(t, dim)
                    .map(|v| v.values)
                    .map_err(|e| BackendError::Permanent(e.to_string()))
            })
            .collect()
    }
}

/// Hash used to name chat fixtures: SHA-256 of `system ‖ 0x00 ‖ user`.
pub fn prompt_hash(system: &str, user: &str) -> String {
    content_key(&[system.as_bytes(), user.as_bytes()])
}

/// Replays recorded responses stored as `<dir>/<prompt_hash>.txt`. Unknown
/// prompts fail with [`BackendError::StubMiss`].
#[derive(Debug, Clone)]
pub struct StubChatBackend {
    pub fixtures_dir: PathBuf,
}

impl StubChatBackend {
    pub fn new(fixtures_dir: impl Into<PathBuf>) -> Self {
        Self {
            fixtures_dir: fixtures_dir.into(),
        }
    }

    pub fn fixture_path(&self, system: &str, user: &str) -> PathBuf {
        self.fixtures_dir
            .join(format!("{}.txt", prompt_hash(system, user)))
    }

    /// Records a response for the given prompt.
    pub fn record(&self, system: &str, user: &str, response: &str) -> io::Result<PathBuf> {
        fs::create_dir_all(&self.fixtures_dir)?;
        let path = self.fixture_path(system, user);
        fs::write(&path, response)?;
        Ok(path)
    }
}

impl ChatBackend for StubChatBackend {
    fn complete(&self, _model: &str, system: &str, user: &str) -> Result<String, BackendError> {
        let path = self.fixture_path(system, user);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(BackendError::StubMiss(prompt_hash(system, user)))
            }
            Err(e) => Err(BackendError::Permanent(format!("{}: {e}", path.display()))),
        }
    }
}
