use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::clients::ServiceConfig;
use crate::localization::LocalizeConfig;
use crate::retrieval::StrategyConfig;

/// Localization settings other than the agreement threshold, which lives at
/// the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationSection {
    pub window: usize,
    pub tau: f64,
    pub encoder: Option<String>,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        let d = LocalizeConfig::default();
        Self {
            window: d.window,
            tau: d.tau,
            encoder: d.encoder,
        }
    }
}

/// Relative paths are resolved against the directory holding the config
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    pub topics_path: PathBuf,
    #[serde(default)]
    pub qrels_path: Option<PathBuf>,
    #[serde(default)]
    pub gold_steps_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stub_mode: bool,
    /// Recorded chat replies used in stub mode.
    #[serde(default)]
    pub stub_fixtures_dir: Option<PathBuf>,
    /// Vector size of the offline embedder for encoders not named `stub-<n>`.
    #[serde(default = "default_stub_dim")]
    pub stub_embedding_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Thread count for stage-internal parallelism; all cores when unset.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub ndcg_cutoff: Option<usize>,
    #[serde(default)]
    pub retrieval: StrategyConfig,
    #[serde(default)]
    pub localization: LocalizationSection,
    #[serde(default)]
    pub embedding: ServiceConfig,
    #[serde(default)]
    pub chat: ServiceConfig,
}

fn default_stub_dim() -> usize {
    256
}

fn default_theta() -> f64 {
    0.5
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PipelineError::MissingInput {
            what: "config file".into(),
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&raw, base)
    }

    pub fn from_toml(raw: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(raw).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.topics_path);
        fix(&mut self.output_dir);
        for p in [
            &mut self.qrels_path,
            &mut self.gold_steps_path,
            &mut self.stub_fixtures_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for svc in [&mut self.embedding, &mut self.chat] {
            if let Some(p) = &mut svc.cache_dir {
                fix(p);
            }
        }
    }

    pub fn localize_config(&self) -> LocalizeConfig {
        LocalizeConfig {
            theta: self.theta,
            window: self.localization.window,
            tau: self.localization.tau,
            encoder: Some(
                self.localization
                    .encoder
                    .clone()
                    .unwrap_or_else(|| self.retrieval.encoders[0].clone()),
            ),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.retrieval
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.localize_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, svc) in [("embedding", &self.embedding), ("chat", &self.chat)] {
            svc.validate()
                .map_err(|e| PipelineError::Config(format!("[{name}] {e}")))?;
        }
        if self.workers == Some(0) {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if self.ndcg_cutoff == Some(0) {
            return Err(PipelineError::Config(
                "ndcg_cutoff must be at least 1".into(),
            ));
        }
        if self.stub_embedding_dim == 0 {
            return Err(PipelineError::Config(
                "stub_embedding_dim must be at least 1".into(),
            ));
        }
        if !self.stub_mode && self.embedding.endpoint.is_empty() {
            return Err(PipelineError::Config(
                "[embedding] endpoint is required outside stub mode".into(),
            ));
        }
        Ok(())
    }
}
