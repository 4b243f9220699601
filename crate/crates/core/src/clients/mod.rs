//! Access to external embedding and chat-completion services.
//!
//! Both clients sit in front of a pluggable backend (HTTP or offline stub),
//! consult a content-addressed disk cache before touching the backend, and
//! retry failed requests with exponential backoff.

pub mod cache;
pub mod http;
pub mod stub;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MedicalQuestion;

type BatchResults = Vec<Result<Vec<f64>, BackendError>>;
pub use cache::{content_key, DiskCache};
pub use http::{HttpChatBackend, HttpEmbeddingBackend};
pub use stub::{prompt_hash, stub_embed, StubChatBackend, StubEmbeddingBackend};

/// System prompt used to expand a question into step-by-step instructions.
pub const EXPANSION_SYSTEM_PROMPT: &str = "You act as a medical or a health helper. Given a list of medical or health-related how-to questions, output the instructions step by step.";

const EMBED_NAMESPACE: &str = "embeddings";
const CHAT_NAMESPACE: &str = "chat";
const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("text has no tokens")]
    EmptyText,
    #[error("invalid embedding: {0}")]
    InvalidVector(String),
    #[error("embedding service unavailable for inputs {indices:?}: {message}")]
    ServiceUnavailable {
        indices: Vec<usize>,
        message: String,
    },
    #[error(
        "inconsistent embedding dimension at input {index}: expected {expected}, found {found}"
    )]
    InconsistentDim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("question expansion failed: {0}")]
    ExpansionFailed(String),
    #[error("no stub fixture for prompt hash {0}")]
    StubMiss(String),
    #[error("chat service failed: {0}")]
    ChatFailed(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
}

/// Failure reported by a backend for a single request.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
    #[error("stub miss: {0}")]
    StubMiss(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        !matches!(self, BackendError::StubMiss(_))
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed_batch(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, model: &str, system: &str, user: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self, ClientError> {
        if values.is_empty() {
            return Err(ClientError::InvalidVector("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::InvalidVector("non-finite component".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedAnswer {
    pub query_id: String,
    pub text: String,
    pub source_model: String,
    /// Set when expansion failed and callers should fall back to the
    /// original question.
    pub fallback_reason: Option<String>,
}

impl ExpandedAnswer {
    pub fn fallback(
        query_id: impl Into<String>,
        source_model: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            text: String::new(),
            source_model: source_model.into(),
            fallback_reason: Some(reason.into()),
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback_reason.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Chat model name; embedding calls pass their model explicitly.
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub cache_dir: Option<PathBuf>,
    pub backoff_ms: u64,
    pub batch_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key_env: None,
            model: "gpt-4".into(),
            timeout_s: 60.0,
            max_retries: 3,
            max_parallel: 4,
            cache_dir: None,
            backoff_ms: 500,
            batch_size: 32,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_parallel == 0 {
            return Err("max_parallel must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err("timeout_s must be positive".into());
        }
        Ok(())
    }
}

/// Counters shared by every client built from the same stats handle.
#[derive(Debug, Default)]
pub struct ServiceStats {
    requests: AtomicU64,
    cache_hits: AtomicU64,
}

impl ServiceStats {
    /// Backend requests issued, retries included.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }
}

fn with_retries<T>(
    cfg: &ServiceConfig,
    stats: &ServiceStats,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut delay = cfg.backoff_ms;
    let mut attempt = 0;
    loop {
        stats.requests.fetch_add(1, Ordering::Relaxed);
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if !e.retryable() || attempt >= cfg.max_retries => return Err(e),
            Err(e) => {
                attempt += 1;
                log::warn!(
                    "request failed (attempt {attempt}/{}): {e}",
                    cfg.max_retries + 1
                );
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                delay = delay.saturating_mul(2).min(MAX_BACKOFF_MS);
            }
        }
    }
}

fn build_cache(cfg: &ServiceConfig) -> Option<DiskCache> {
    cfg.cache_dir.as_ref().map(DiskCache::new)
}

pub struct EmbeddingClient {
    backend: Arc<dyn EmbeddingBackend>,
    cfg: ServiceConfig,
    cache: Option<DiskCache>,
    stats: Arc<ServiceStats>,
}

impl EmbeddingClient {
    pub fn new(
        backend: Arc<dyn EmbeddingBackend>,
        cfg: ServiceConfig,
        stats: Arc<ServiceStats>,
    ) -> Self {
        let cache = build_cache(&cfg);
        Self {
            backend,
            cfg,
            cache,
            stats,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ServiceStats {
        &self.stats
    }

    fn cache_key(model_id: &str, text: &str) -> String {
        content_key(&[model_id.as_bytes(), text.as_bytes()])
    }

    /// Embeds `texts` in order. Cached vectors are returned without a
    /// request; everything else goes to the backend in batches, and a batch
    /// that keeps failing is retried item by item so the error names exactly
    /// the inputs that could not be embedded.
    pub fn embed_texts(
        &self,
        texts: &[String],
        model_id: &str,
    ) -> Result<Vec<EmbeddingVector>, ClientError> {
        let mut results: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        // distinct uncached text -> positions it fills
        let mut pending: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pending_pos: HashMap<&str, usize> = HashMap::new();
        for (i, text) in texts.iter().enumerate() {
            if let Some(&p) = pending_pos.get(text.as_str()) {
                pending[p].1.push(i);
                continue;
            }
            if let Some(cache) = &self.cache {
                if let Some(bytes) = cache.get(EMBED_NAMESPACE, &Self::cache_key(model_id, text))? {
                    if let Some(v) = cache::decode_vector(&bytes) {
                        self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                        results[i] = Some(v);
                        continue;
                    }
                }
            }
            pending_pos.insert(text.as_str(), pending.len());
            pending.push((text.clone(), vec![i]));
        }

        let fetched = self.fetch(&pending, model_id);
        let mut failed = Vec::new();
        let mut last_error = String::new();
        for ((text, positions), outcome) in pending.iter().zip(fetched) {
            match outcome {
                Ok(values) => {
                    if let Some(cache) = &self.cache {
                        if values.iter().all(|v| v.is_finite()) && !values.is_empty() {
                            cache.put(
                                EMBED_NAMESPACE,
                                &Self::cache_key(model_id, text),
                                &cache::encode_vector(&values),
                            )?;
                        }
                    }
                    for &p in positions {
                        results[p] = Some(values.clone());
                    }
                }
                Err(e) => {
                    last_error = e.to_string();
                    failed.extend(positions.iter().copied());
                }
            }
        }
        if !failed.is_empty() {
            failed.sort_unstable();
            return Err(ClientError::ServiceUnavailable {
                indices: failed,
                message: last_error,
            });
        }

        let mut out = Vec::with_capacity(texts.len());
        let mut expected = None;
        for (index, values) in results.into_iter().enumerate() {
            let values = values.expect("every position filled");
            let dim = values.len();
            match expected {
                None => expected = Some(dim),
                Some(e) if e != dim => {
                    return Err(ClientError::InconsistentDim {
                        index,
                        expected: e,
                        found: dim,
                    })
                }
                _ => {}
            }
            out.push(EmbeddingVector::new(model_id, values)?);
        }
        Ok(out)
    }

    fn fetch(
        &self,
        pending: &[(String, Vec<usize>)],
        model_id: &str,
    ) -> Vec<Result<Vec<f64>, BackendError>> {
        if pending.is_empty() {
            return Vec::new();
        }
        let batches: Vec<&[(String, Vec<usize>)]> =
            pending.chunks(self.cfg.batch_size.max(1)).collect();
        let slots: Vec<Mutex<Option<BatchResults>>> =
            batches.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_parallel.max(1).min(batches.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::Relaxed);
                    if b >= batches.len() {
                        break;
                    }
                    let texts: Vec<String> = batches[b].iter().map(|(t, _)| t.clone()).collect();
                    let outcome = self.fetch_batch(&texts, model_id);
                    *slots[b].lock().expect("slot lock") = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .flat_map(|m| m.into_inner().expect("slot lock").expect("batch processed"))
            .collect()
    }

    fn fetch_batch(&self, texts: &[String], model_id: &str) -> Vec<Result<Vec<f64>, BackendError>> {
        let whole = with_retries(&self.cfg, &self.stats, || {
            let got = self.backend.embed_batch(model_id, texts)?;
            if got.len() != texts.len() {
                return Err(BackendError::Permanent(format!(
                    "{} vectors for {} inputs",
                    got.len(),
                    texts.len()
                )));
            }
            Ok(got)
        });
        match whole {
            Ok(vectors) => vectors.into_iter().map(Ok).collect(),
            Err(e) if texts.len() == 1 => vec![Err(e)],
            Err(_) => texts
                .iter()
                .map(|t| {
                    with_retries(&self.cfg, &self.stats, || {
                        self.backend
                            .embed_batch(model_id, std::slice::from_ref(t))
                            .and_then(|mut v| {
                                v.pop().filter(|_| v.is_empty()).ok_or_else(|| {
                                    BackendError::Permanent("expected one vector".into())
                                })
                            })
                    })
                })
                .collect(),
        }
    }
}

pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    cfg: ServiceConfig,
    cache: Option<DiskCache>,
    stats: Arc<ServiceStats>,
}

impl ChatClient {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        cfg: ServiceConfig,
        stats: Arc<ServiceStats>,
    ) -> Self {
        let cache = build_cache(&cfg);
        Self {
            backend,
            cfg,
            cache,
            stats,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ServiceStats {
        &self.stats
    }

    /// Cached, retried chat completion with a system and a user message.
    pub fn complete_chat(&self, system: &str, user: &str) -> Result<String, ClientError> {
        let model = self.cfg.model.as_str();
        let key = content_key(&[model.as_bytes(), system.as_bytes(), user.as_bytes()]);
        if let Some(cache) = &self.cache {
            if let Some(bytes) = cache.get(CHAT_NAMESPACE, &key)? {
                if let Ok(text) = String::from_utf8(bytes) {
                    self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(text);
                }
            }
        }
        let text = with_retries(&self.cfg, &self.stats, || {
            self.backend.complete(model, system, user)
        })
        .map_err(|e| match e {
            BackendError::StubMiss(hash) => ClientError::StubMiss(hash),
            other => ClientError::ChatFailed(other.to_string()),
        })?;
        if let Some(cache) = &self.cache {
            cache.put(CHAT_NAMESPACE, &key, text.as_bytes())?;
        }
        Ok(text)
    }

    /// Asks the chat service to answer the question step by step.
    pub fn expand_question(&self, q: &MedicalQuestion) -> Result<ExpandedAnswer, ClientError> {
        let text = self
            .complete_chat(EXPANSION_SYSTEM_PROMPT, &q.text)
            .map_err(|e| ClientError::ExpansionFailed(e.to_string()))?;
        Ok(ExpandedAnswer {
            query_id: q.query_id.clone(),
            text,
            source_model: self.cfg.model.clone(),
            fallback_reason: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn cfg(cache: Option<PathBuf>) -> ServiceConfig {
        ServiceConfig {
            cache_dir: cache,
            backoff_ms: 0,
            max_retries: 2,
            max_parallel: 3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn texts(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    /// Fails any request that contains the poisoned text.
    struct Poisoned {
        inner: StubEmbeddingBackend,
        poison: String,
    }

    impl EmbeddingBackend for Poisoned {
        fn embed_batch(
            &self,
            model_id: &str,
            texts: &[String],
        ) -> Result<Vec<Vec<f64>>, BackendError> {
            if texts.contains(&self.poison) {
                return Err(BackendError::Transient("boom".into()));
            }
            self.inner.embed_batch(model_id, texts)
        }
    }

    /// Fails the first `failures` calls.
    struct Flaky {
        failures: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _m: &str, _s: &str, user: &str) -> Result<String, BackendError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Transient("503".into()));
            }
            Ok(format!("echo {user}"))
        }
    }

    struct WrongDim;

    impl EmbeddingBackend for WrongDim {
        fn embed_batch(&self, _m: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(texts.iter().map(|t| vec![1.0; t.len()]).collect())
        }
    }

    #[test]
    fn stub_passthrough() {
        let client = EmbeddingClient::new(
            Arc::new(StubEmbeddingBackend::new(32)),
            cfg(None),
            Default::default(),
        );
        let got = client.embed_texts(&texts(&["q"]), "stub-32").unwrap();
        assert_eq!(got, vec![stub_embed("q", 32).unwrap()]);
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let stats = Arc::new(ServiceStats::default());
        let client = EmbeddingClient::new(
            Arc::new(StubEmbeddingBackend::new(16)),
            cfg(Some(dir.path().into())),
            stats.clone(),
        );
        let first = client
            .embed_texts(&texts(&["wash hands", "use soap"]), "enc")
            .unwrap();
        let requests = stats.requests();
        assert!(requests > 0);
        let second = client
            .embed_texts(&texts(&["wash hands", "use soap"]), "enc")
            .unwrap();
        assert_eq!(first, second);
        assert_eq!(stats.requests(), requests);
        assert_eq!(stats.cache_hits(), 2);
    }

    #[test]
    fn permanent_failure_names_failed_index() {
        let backend = Poisoned {
            inner: StubEmbeddingBackend::new(8),
            poison: "bad".into(),
        };
        let client = EmbeddingClient::new(
            Arc::new(backend),
            ServiceConfig {
                batch_size: 8,
                ..cfg(None)
            },
            Default::default(),
        );
        let err = client
            .embed_texts(&texts(&["a", "bad", "c"]), "m")
            .unwrap_err();
        match err {
            ClientError::ServiceUnavailable { indices, .. } => assert_eq!(indices, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let client = EmbeddingClient::new(Arc::new(WrongDim), cfg(None), Default::default());
        let err = client
            .embed_texts(&texts(&["ab", "ab", "abc"]), "m")
            .unwrap_err();
        assert!(matches!(
            err,
            ClientError::InconsistentDim {
                index: 2,
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn batching_is_stateless() {
        let client = EmbeddingClient::new(
            Arc::new(StubEmbeddingBackend::new(24)),
            cfg(None),
            Default::default(),
        );
        let xs = texts(&["one two", "three", "four five six"]);
        let ys = texts(&["seven", "one two"]);
        let all: Vec<String> = xs.iter().chain(&ys).cloned().collect();
        let mut split = client.embed_texts(&xs, "m").unwrap();
        split.extend(client.embed_texts(&ys, "m").unwrap());
        assert_eq!(client.embed_texts(&all, "m").unwrap(), split);
    }

    #[test]
    fn transient_failures_retried() {
        let stats = Arc::new(ServiceStats::default());
        let client = ChatClient::new(
            Arc::new(Flaky {
                failures: AtomicU32::new(2),
            }),
            ServiceConfig {
                max_retries: 3,
                ..cfg(None)
            },
            stats.clone(),
        );
        assert_eq!(client.complete_chat("s", "u").unwrap(), "echo u");
        assert_eq!(stats.requests(), 3);
    }

    #[test]
    fn retries_exhausted() {
        let client = ChatClient::new(
            Arc::new(Flaky {
                failures: AtomicU32::new(5),
            }),
            ServiceConfig {
                max_retries: 1,
                ..cfg(None)
            },
            Default::default(),
        );
        assert!(matches!(
            client.complete_chat("s", "u"),
            Err(ClientError::ChatFailed(_))
        ));
    }

    #[test]
    fn stub_miss_fails_closed_without_retry() {
        let dir = tempfile::tempdir().unwrap();
        let stats = Arc::new(ServiceStats::default());
        let client = ChatClient::new(
            Arc::new(StubChatBackend::new(dir.path())),
            cfg(None),
            stats.clone(),
        );
        assert!(matches!(
            client.complete_chat("s", "u"),
            Err(ClientError::StubMiss(_))
        ));
        assert_eq!(stats.requests(), 1);
    }

    #[test]
    fn expansion_uses_fixture_and_cache() {
        let fixtures = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let stub = StubChatBackend::new(fixtures.path());
        let q = MedicalQuestion::new("q1", "How to treat a burn?").unwrap();
        stub.record(
            EXPANSION_SYSTEM_PROMPT,
            &q.text,
            "Step 1: cool the burn under running water.",
        )
        .unwrap();
        let stats = Arc::new(ServiceStats::default());
        let client = ChatClient::new(
            Arc::new(stub),
            cfg(Some(cache.path().into())),
            stats.clone(),
        );
        let a = client.expand_question(&q).unwrap();
        assert_eq!(a.text, "Step 1: cool the burn under running water.");
        assert!(!a.is_fallback());
        let b = client.expand_question(&q).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats.requests(), 1);
    }

    #[test]
    fn expansion_failure_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let client = ChatClient::new(
            Arc::new(StubChatBackend::new(dir.path())),
            cfg(None),
            Default::default(),
        );
        let q = MedicalQuestion::new("q1", "How to floss?").unwrap();
        assert!(matches!(
            client.expand_question(&q),
            Err(ClientError::ExpansionFailed(_))
        ));
    }
}
