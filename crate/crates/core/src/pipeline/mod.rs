//! Stage orchestration: ingest, retrieve, localize, stepcap and the two
//! evaluations, each cached on a digest of its inputs.

mod cache;
mod config;

use std::cell::OnceCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::clients::{
    ChatBackend, ChatClient, ClientError, EmbeddingBackend, EmbeddingClient, HttpChatBackend,
    HttpEmbeddingBackend, ServiceConfig, ServiceStats, StubChatBackend, StubEmbeddingBackend,
};
use crate::corpus::{
    load_corpus, load_gold_steps, load_qrels, load_topics, Corpus, CorpusError, GoldStepSet,
    MedicalQuestion,
};
use crate::localization::{
    localize, write_localizations, LocalizationError, LocalizationRecord, LocalizeInputs,
};
use crate::metrics::{
    evaluate_retrieval, evaluate_steps, format_report, EvaluationReport, MetricsError,
};
use crate::retrieval::{
    parse_frame_features, read_run, retrieve, write_run, FrameFeatures, RetrievalError, RunFile,
};
use crate::stepcap::{load_generated_captions, run_qfisc, write_step_sets, StepcapError};
pub use cache::{dir_digest, file_digest, sha256_hex, ARTIFACT_VERSION, STAGE_DIR};
pub use config::{LocalizationSection, PipelineConfig};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{what} {path}: {reason}")]
    MissingInput {
        what: String,
        path: PathBuf,
        reason: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("service: {0}")]
    Service(String),
    #[error("cannot write {path}: {reason}")]
    Output { path: PathBuf, reason: String },
}

impl PipelineError {
    /// 1 usage or config, 2 data, 3 service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_)
            | PipelineError::Config(_)
            | PipelineError::MissingInput { .. } => 1,
            PipelineError::Data(_) | PipelineError::Output { .. } => 2,
            PipelineError::Service(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Usage(_) => "usage",
            PipelineError::Config(_) => "config",
            PipelineError::MissingInput { .. } => "missing_input",
            PipelineError::Data(_) => "data",
            PipelineError::Service(_) => "service",
            PipelineError::Output { .. } => "output",
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ClientError> for PipelineError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::EmptyText => PipelineError::Data(e.to_string()),
            other => PipelineError::Service(other.to_string()),
        }
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Client(c) => c.into(),
            RetrievalError::InvalidConfig(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<LocalizationError> for PipelineError {
    fn from(e: LocalizationError) -> Self {
        match e {
            LocalizationError::Retrieval(r) => r.into(),
            LocalizationError::InvalidConfig(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<StepcapError> for PipelineError {
    fn from(e: StepcapError) -> Self {
        match e {
            StepcapError::Client(c) => c.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Ingest,
    Retrieve,
    Localize,
    Stepcap,
    EvalRetrieval,
    EvalSteps,
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Retrieve => "retrieve",
            Command::Localize => "localize",
            Command::Stepcap => "stepcap",
            Command::EvalRetrieval => "eval-retrieval",
            Command::EvalSteps => "eval-steps",
            Command::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ingest" => Command::Ingest,
            "retrieve" => Command::Retrieve,
            "localize" => Command::Localize,
            "stepcap" => Command::Stepcap,
            "eval-retrieval" => Command::EvalRetrieval,
            "eval-steps" => Command::EvalSteps,
            "pipeline" => Command::Pipeline,
            other => return Err(PipelineError::Usage(format!("unknown command {other:?}"))),
        })
    }
}

/// Inputs that replace the artifacts a stage would otherwise read from the
/// output directory.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_path: Option<PathBuf>,
    pub steps_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionSummary {
    pub stages: Vec<StageOutcome>,
    /// Calls that reached an embedding or chat backend.
    pub service_requests: u64,
    pub cache_hits: u64,
    pub warnings: Vec<String>,
    /// Evaluation produced by this command, if any.
    #[serde(skip)]
    pub report: Option<EvaluationReport>,
}

pub fn run_path(strategy_name: &str) -> String {
    format!("runs/{strategy_name}.trec")
}

pub fn expansions_path(strategy_name: &str) -> String {
    format!("runs/{strategy_name}.expansions.json")
}

pub const INGEST_FILE: &str = "ingest.json";
pub const LOCALIZATION_FILE: &str = "localization.txt";
pub const STEPS_FILE: &str = "steps.json";
pub const RETRIEVAL_REPORT: &str = "reports/retrieval";
pub const STEPS_REPORT: &str = "reports/steps";
pub const SUMMARY_REPORT: &str = "report";

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    overrides: &'a Overrides,
    stats: Arc<ServiceStats>,
    corpus: OnceCell<Corpus>,
    topics: OnceCell<Vec<MedicalQuestion>>,
    outcomes: Vec<StageOutcome>,
    warnings: Vec<String>,
    report: Option<EvaluationReport>,
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

/// Service settings that change results; timeouts and parallelism do not.
#[derive(Serialize)]
struct ServiceIdentity<'a> {
    endpoint: &'a str,
    model: &'a str,
}

impl<'a> Ctx<'a> {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn corpus(&self) -> Result<&Corpus, PipelineError> {
        if self.corpus.get().is_none() {
            dir_digest(&self.cfg.corpus_dir, "corpus directory")?;
            let _ = self.corpus.set(load_corpus(&self.cfg.corpus_dir)?);
        }
        Ok(self.corpus.get().expect("corpus loaded"))
    }

    fn topics(&self) -> Result<&[MedicalQuestion], PipelineError> {
        if self.topics.get().is_none() {
            file_digest(&self.cfg.topics_path, "topics file")?;
            let _ = self.topics.set(load_topics(&self.cfg.topics_path)?);
        }
        Ok(self.topics.get().expect("topics loaded"))
    }

    fn qrels_path(&self) -> Result<&Path, PipelineError> {
        self.cfg
            .qrels_path
            .as_deref()
            .ok_or_else(|| PipelineError::Config("qrels_path is not set".into()))
    }

    fn gold_path(&self) -> Result<&Path, PipelineError> {
        self.cfg
            .gold_steps_path
            .as_deref()
            .ok_or_else(|| PipelineError::Config("gold_steps_path is not set".into()))
    }

    fn service_cfg(&self, base: &ServiceConfig) -> ServiceConfig {
        let mut svc = base.clone();
        if let Some(w) = self.cfg.workers {
            svc.max_parallel = w;
        }
        svc
    }

    fn embedder(&self) -> Result<EmbeddingClient, PipelineError> {
        let svc = self.service_cfg(&self.cfg.embedding);
        let backend: Arc<dyn EmbeddingBackend> = if self.cfg.stub_mode {
            Arc::new(StubEmbeddingBackend::new(self.cfg.stub_embedding_dim))
        } else {
            Arc::new(HttpEmbeddingBackend::new(&svc)?)
        };
        Ok(EmbeddingClient::new(backend, svc, self.stats.clone()))
    }

    fn chat(&self) -> Result<ChatClient, PipelineError> {
        let svc = self.service_cfg(&self.cfg.chat);
        let backend: Arc<dyn ChatBackend> = if self.cfg.stub_mode {
            let dir = self.cfg.stub_fixtures_dir.clone().ok_or_else(|| {
                PipelineError::Config("stub_fixtures_dir is required in stub mode".into())
            })?;
            Arc::new(StubChatBackend::new(dir))
        } else {
            Arc::new(HttpChatBackend::new(&svc)?)
        };
        Ok(ChatClient::new(backend, svc, self.stats.clone()))
    }

    fn service_identity(&self, svc: &'a ServiceConfig) -> ServiceIdentity<'a> {
        if self.cfg.stub_mode {
            ServiceIdentity {
                endpoint: "stub",
                model: &svc.model,
            }
        } else {
            ServiceIdentity {
                endpoint: &svc.endpoint,
                model: &svc.model,
            }
        }
    }

    fn stub_digest(&self) -> Result<String, PipelineError> {
        match (&self.cfg.stub_fixtures_dir, self.cfg.stub_mode) {
            (Some(dir), true) if dir.is_dir() => dir_digest(dir, "stub fixtures directory"),
            _ => Ok(String::new()),
        }
    }

    /// Runs `body` unless the stage's inputs are unchanged since its last
    /// successful run.
    fn stage(
        &mut self,
        name: &str,
        digest: String,
        body: impl FnOnce(&Self) -> Result<Vec<(String, Vec<u8>)>, PipelineError>,
    ) -> Result<(), PipelineError> {
        let status = if cache::is_fresh(&self.cfg.output_dir, name, &digest) {
            log::info!("{name}: inputs unchanged, reusing artifacts");
            StageStatus::Cached
        } else {
            log::info!("{name}: running");
            let outputs = body(self)?;
            cache::commit_stage(&self.cfg.output_dir, name, &digest, &outputs)?;
            StageStatus::Ran
        };
        self.outcomes.push(StageOutcome {
            stage: name.to_string(),
            status,
        });
        Ok(())
    }

    fn base_digest(&self, stage: &str) -> Result<cache::DigestBuilder, PipelineError> {
        let mut d = cache::DigestBuilder::new(stage);
        d.add(
            "corpus",
            &dir_digest(&self.cfg.corpus_dir, "corpus directory")?,
        );
        d.add(
            "topics",
            &file_digest(&self.cfg.topics_path, "topics file")?,
        );
        d.add("stub_mode", &self.cfg.stub_mode.to_string());
        if self.cfg.stub_mode {
            d.add(
                "stub_embedding_dim",
                &self.cfg.stub_embedding_dim.to_string(),
            );
        }
        Ok(d)
    }

    fn ingest(&mut self) -> Result<(), PipelineError> {
        let mut d = self.base_digest("ingest")?;
        if let Some(p) = &self.cfg.qrels_path {
            d.add("qrels", &file_digest(p, "qrels file")?);
        }
        if let Some(p) = &self.cfg.gold_steps_path {
            d.add("gold_steps", &file_digest(p, "gold steps file")?);
        }
        self.stage("ingest", d.finish(), |ctx| {
            let corpus = ctx.corpus()?;
            let topics = ctx.topics()?;
            let qrels = ctx.cfg.qrels_path.as_deref().map(load_qrels).transpose()?;
            let gold = ctx
                .cfg
                .gold_steps_path
                .as_deref()
                .map(load_gold_steps)
                .transpose()?;
            #[derive(Serialize)]
            struct VideoSummary<'a> {
                vid: &'a str,
                segments: usize,
                duration_s: f64,
                frame_features: bool,
                captions: bool,
            }
            #[derive(Serialize)]
            struct IngestSummary<'a> {
                artifact_version: u32,
                videos: Vec<VideoSummary<'a>>,
                queries: usize,
                judgments: Option<usize>,
                gold_step_sets: Option<usize>,
            }
            let summary = IngestSummary {
                artifact_version: ARTIFACT_VERSION,
                videos: corpus
                    .videos()
                    .iter()
                    .map(|v| VideoSummary {
                        vid: &v.video_id,
                        segments: v.segments.len(),
                        duration_s: v.duration_s,
                        frame_features: v.frame_features_path.is_some(),
                        captions: v.captions_path.is_some(),
                    })
                    .collect(),
                queries: topics.len(),
                judgments: qrels.map(|q| q.len()),
                gold_step_sets: gold.map(|g| g.len()),
            };
            Ok(vec![(INGEST_FILE.to_string(), json_bytes(&summary))])
        })
    }

    fn retrieve(&mut self) -> Result<(), PipelineError> {
        let rc = &self.cfg.retrieval;
        let mut d = self.base_digest("retrieve")?;
        d.add_json("retrieval", rc);
        d.add_json("embedding", &self.service_identity(&self.cfg.embedding));
        if rc.strategy.uses_expansion() {
            d.add_json("chat", &self.service_identity(&self.cfg.chat));
            d.add("stub_fixtures", &self.stub_digest()?);
        }
        let name = rc.strategy.name();
        self.stage("retrieve", d.finish(), |ctx| {
            let (corpus, topics) = (ctx.corpus()?, ctx.topics()?);
            let embedder = ctx.embedder()?;
            let chat = if rc.strategy.uses_expansion() {
                Some(ctx.chat()?)
            } else {
                None
            };
            let out = retrieve(rc, corpus, topics, &embedder, chat.as_ref())?;
            let mut outputs = vec![(run_path(name), write_run(&out.run)?.into_bytes())];
            if rc.strategy.uses_expansion() {
                outputs.push((expansions_path(name), json_bytes(&out.expansions)));
            }
            Ok(outputs)
        })
    }

    /// The configured strategy's run from the output directory.
    fn current_run(&self) -> Result<(String, RunFile), PipelineError> {
        let path = self.out(&run_path(self.cfg.retrieval.strategy.name()));
        let digest = file_digest(&path, "run file (run the retrieve stage first)")?;
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        let run =
            read_run(&raw).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok((digest, run))
    }

    fn top1_pairs(&self, run: &RunFile) -> Result<Vec<(String, String)>, PipelineError> {
        let rankings = run.rankings();
        Ok(self
            .topics()?
            .iter()
            .filter_map(|q| {
                rankings
                    .get(q.query_id.as_str())
                    .and_then(|r| r.first())
                    .map(|v| (q.query_id.clone(), v.to_string()))
            })
            .collect())
    }

    fn localize(&mut self) -> Result<(), PipelineError> {
        let lc = self.cfg.localize_config();
        let (run_digest, run) = self.current_run()?;
        let mut d = self.base_digest("localize")?;
        d.add_json("localization", &lc);
        d.add("run", &run_digest);
        d.add_json("embedding", &self.service_identity(&self.cfg.embedding));
        self.stage("localize", d.finish(), |ctx| {
            let (corpus, topics) = (ctx.corpus()?, ctx.topics()?);
            let pairs = ctx.top1_pairs(&run)?;
            let encoder = lc.encoder.clone().expect("encoder resolved by config");
            let embedder = ctx.embedder()?;
            let questions: HashMap<&str, &MedicalQuestion> =
                topics.iter().map(|q| (q.query_id.as_str(), q)).collect();
            let q_texts: Vec<String> = pairs
                .iter()
                .map(|(q, _)| questions[q.as_str()].text.clone())
                .collect();
            let q_embs = embedder.embed_texts(&q_texts, &encoder)?;

            let mut vids: Vec<&str> = pairs.iter().map(|(_, v)| v.as_str()).collect();
            vids.sort();
            vids.dedup();
            let mut seg_embs = HashMap::new();
            let mut frames: HashMap<&str, FrameFeatures> = HashMap::new();
            for vid in vids {
                let video = corpus
                    .get(vid)
                    .ok_or_else(|| PipelineError::Data(format!("run names unknown video {vid}")))?;
                let texts: Vec<String> = video.segments.iter().map(|s| s.text.clone()).collect();
                seg_embs.insert(vid, embedder.embed_texts(&texts, &encoder)?);
                if let Some(path) = &video.frame_features_path {
                    let raw = std::fs::read(path)
                        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
                    let f = parse_frame_features(&raw)
                        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
                    frames.insert(vid, f);
                }
            }
            let records = pairs
                .par_iter()
                .zip(q_embs.par_iter())
                .map(|((qid, vid), q_emb)| {
                    let video = corpus.get(vid).expect("checked above");
                    let inputs = LocalizeInputs {
                        video,
                        q_emb,
                        segment_embs: &seg_embs[vid.as_str()],
                        frames: frames.get(vid.as_str()),
                    };
                    let loc = localize(inputs, &lc)?;
                    Ok(LocalizationRecord {
                        query_id: qid.clone(),
                        video_id: vid.clone(),
                        span: loc.prediction.span,
                        confidence: loc.prediction.confidence,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(vec![(
                LOCALIZATION_FILE.to_string(),
                write_localizations(&records).into_bytes(),
            )])
        })
    }

    fn stepcap(&mut self) -> Result<(), PipelineError> {
        let mut d = self.base_digest("stepcap")?;
        d.add_json("chat", &self.service_identity(&self.cfg.chat));
        d.add("stub_fixtures", &self.stub_digest()?);
        let from_gold = self.cfg.gold_steps_path.clone();
        let run = match &from_gold {
            Some(p) => {
                d.add("pairs_from_gold", &file_digest(p, "gold steps file")?);
                None
            }
            None => {
                let (digest, run) = self.current_run()?;
                d.add("pairs_from_run", &digest);
                Some(run)
            }
        };
        let mut skipped = Vec::new();
        self.stage("stepcap", d.finish(), |ctx| {
            let (corpus, topics) = (ctx.corpus()?, ctx.topics()?);
            let pairs: Vec<(String, String)> = match (&from_gold, &run) {
                (Some(p), _) => load_gold_steps(p)?
                    .into_iter()
                    .map(|g| (g.query_id, g.video_id))
                    .collect(),
                (None, Some(run)) => ctx.top1_pairs(run)?,
                (None, None) => unreachable!("pairs come from gold steps or a run"),
            };
            let questions: HashMap<&str, &MedicalQuestion> =
                topics.iter().map(|q| (q.query_id.as_str(), q)).collect();
            let chat = ctx.chat()?;
            let results = pairs
                .par_iter()
                .map(|(qid, vid)| {
                    let q = questions
                        .get(qid.as_str())
                        .ok_or_else(|| PipelineError::Data(format!("no topic for query {qid}")))?;
                    let video = corpus
                        .get(vid)
                        .ok_or_else(|| PipelineError::Data(format!("unknown video {vid}")))?;
                    let generated = video
                        .captions_path
                        .as_deref()
                        .map(load_generated_captions)
                        .transpose()?
                        .unwrap_or_default();
                    match run_qfisc(video, q, &generated, &chat) {
                        Ok(steps) => Ok(Ok(GoldStepSet {
                            query_id: qid.clone(),
                            video_id: vid.clone(),
                            steps,
                        })),
                        Err(
                            e @ (StepcapError::UnparseableResponse(_) | StepcapError::NoValidSteps),
                        ) => Ok(Err(format!("stepcap ({qid}, {vid}) skipped: {e}"))),
                        Err(e) => Err(PipelineError::from(e)),
                    }
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let mut sets = Vec::new();
            for r in results {
                match r {
                    Ok(set) => sets.push(set),
                    Err(w) => {
                        log::warn!("{w}");
                        skipped.push(w);
                    }
                }
            }
            Ok(vec![(
                STEPS_FILE.to_string(),
                write_step_sets(&sets).into_bytes(),
            )])
        })?;
        self.warnings.extend(skipped);
        Ok(())
    }

    fn eval_retrieval(&mut self) -> Result<(), PipelineError> {
        let run_file = match &self.overrides.run_path {
            Some(p) => p.clone(),
            None => self.out(&run_path(self.cfg.retrieval.strategy.name())),
        };
        let qrels_path = self.qrels_path()?.to_path_buf();
        let mut d = cache::DigestBuilder::new("eval-retrieval");
        d.add("run", &file_digest(&run_file, "run file")?);
        d.add("qrels", &file_digest(&qrels_path, "qrels file")?);
        d.add_json("ndcg_cutoff", &self.cfg.ndcg_cutoff);
        let cutoff = self.cfg.ndcg_cutoff;
        self.stage("eval-retrieval", d.finish(), |_| {
            let raw = std::fs::read_to_string(&run_file)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", run_file.display())))?;
            let run = read_run(&raw)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", run_file.display())))?;
            let qrels = load_qrels(&qrels_path)?;
            let eval = evaluate_retrieval(&run, &qrels, cutoff)?;
            let report = EvaluationReport::new(Some(eval.report), None, cutoff);
            Ok(report_outputs(RETRIEVAL_REPORT, &report))
        })?;
        self.report = Some(self.read_report(RETRIEVAL_REPORT)?);
        Ok(())
    }

    fn eval_steps(&mut self) -> Result<(), PipelineError> {
        let steps_file = self
            .overrides
            .steps_path
            .clone()
            .unwrap_or_else(|| self.out(STEPS_FILE));
        let gold_path = self.gold_path()?.to_path_buf();
        let mut d = cache::DigestBuilder::new("eval-steps");
        d.add("steps", &file_digest(&steps_file, "steps file")?);
        d.add("gold", &file_digest(&gold_path, "gold steps file")?);
        self.stage("eval-steps", d.finish(), |_| {
            let pred = load_gold_steps(&steps_file)?;
            let gold = load_gold_steps(&gold_path)?;
            let report = EvaluationReport::new(None, Some(evaluate_steps(&pred, &gold)?), None);
            Ok(report_outputs(STEPS_REPORT, &report))
        })?;
        self.report = Some(self.read_report(STEPS_REPORT)?);
        Ok(())
    }

    fn summary(&mut self) -> Result<(), PipelineError> {
        let mut d = cache::DigestBuilder::new("summary");
        let mut parts = Vec::new();
        for base in [RETRIEVAL_REPORT, STEPS_REPORT] {
            let path = self.out(&format!("{base}.json"));
            if path.exists() && self.outcomes.iter().any(|o| o.stage == report_stage(base)) {
                d.add(base, &file_digest(&path, "report")?);
                parts.push(base);
            }
        }
        self.stage("summary", d.finish(), |ctx| {
            let mut merged = EvaluationReport::new(None, None, ctx.cfg.ndcg_cutoff);
            for base in &parts {
                let r = ctx.read_report(base)?;
                merged.retrieval = merged.retrieval.or(r.retrieval);
                merged.captions = merged.captions.or(r.captions);
            }
            Ok(report_outputs(SUMMARY_REPORT, &merged))
        })?;
        self.report = Some(self.read_report(SUMMARY_REPORT)?);
        Ok(())
    }

    fn read_report(&self, base: &str) -> Result<EvaluationReport, PipelineError> {
        let path = self.out(&format!("{base}.json"));
        let raw = std::fs::read(&path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&raw)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }
}

fn report_stage(base: &str) -> &'static str {
    if base == RETRIEVAL_REPORT {
        "eval-retrieval"
    } else {
        "eval-steps"
    }
}

fn report_outputs(base: &str, report: &EvaluationReport) -> Vec<(String, Vec<u8>)> {
    vec![
        (format!("{base}.json"), report.to_json().into_bytes()),
        (format!("{base}.txt"), format_report(report).into_bytes()),
    ]
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Serialize)]
struct Meta<'a> {
    artifact_version: u32,
    tool_version: &'static str,
    command: &'a str,
    seed: u64,
    stub_mode: bool,
    workers: Option<usize>,
    started_unix_s: f64,
    finished_unix_s: f64,
    stages: &'a [StageOutcome],
    service_requests: u64,
    cache_hits: u64,
    warnings: &'a [String],
}

/// Runs `command`; `pipeline` chains every stage and stops at the first
/// failure. Timestamps go to `meta.json` only.
pub fn execute(
    command: Command,
    cfg: &PipelineConfig,
    overrides: &Overrides,
) -> Result<ExecutionSummary, PipelineError> {
    cfg.validate()?;
    let started = unix_now();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let mut ctx = Ctx {
        cfg,
        overrides,
        stats: Arc::new(ServiceStats::default()),
        corpus: OnceCell::new(),
        topics: OnceCell::new(),
        outcomes: Vec::new(),
        warnings: Vec::new(),
        report: None,
    };
    let result = pool.install(|| -> Result<(), PipelineError> {
        match command {
            Command::Ingest => ctx.ingest(),
            Command::Retrieve => ctx.retrieve(),
            Command::Localize => ctx.localize(),
            Command::Stepcap => ctx.stepcap(),
            Command::EvalRetrieval => ctx.eval_retrieval(),
            Command::EvalSteps => ctx.eval_steps(),
            Command::Pipeline => {
                ctx.ingest()?;
                ctx.retrieve()?;
                ctx.localize()?;
                ctx.stepcap()?;
                if cfg.qrels_path.is_some() {
                    ctx.eval_retrieval()?;
                }
                if cfg.gold_steps_path.is_some() {
                    ctx.eval_steps()?;
                }
                ctx.summary()
            }
        }
    });
    let summary = ExecutionSummary {
        stages: ctx.outcomes.clone(),
        service_requests: ctx.stats.requests(),
        cache_hits: ctx.stats.cache_hits(),
        warnings: ctx.warnings.clone(),
        report: ctx.report.clone(),
    };
    if result.is_ok() || cfg.output_dir.exists() {
        let meta = Meta {
            artifact_version: ARTIFACT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.name(),
            seed: cfg.seed,
            stub_mode: cfg.stub_mode,
            workers: cfg.workers,
            started_unix_s: started,
            finished_unix_s: unix_now(),
            stages: &summary.stages,
            service_requests: summary.service_requests,
            cache_hits: summary.cache_hits,
            warnings: &summary.warnings,
        };
        cache::write_atomic(&cfg.output_dir.join(META_FILE), &json_bytes(&meta))?;
    }
    result.map(|()| summary)
}

/// Every file under `dir` except `meta.json`, keyed by relative path.
pub fn artifact_tree(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if key != META_FILE {
                    out.insert(key, sha256_hex(&std::fs::read(&path)?));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Usage("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 1);
        assert_eq!(
            PipelineError::MissingInput {
                what: "topics file".into(),
                path: "t.json".into(),
                reason: "gone".into()
            }
            .exit_code(),
            1
        );
        assert_eq!(
            PipelineError::from(CorpusError::EmptyTranscript).exit_code(),
            2
        );
        assert_eq!(
            PipelineError::from(ClientError::StubMiss("abc".into())).exit_code(),
            3
        );
        assert_eq!(
            PipelineError::from(RetrievalError::Client(ClientError::ChatFailed("x".into())))
                .exit_code(),
            3
        );
        assert_eq!(
            PipelineError::from(RetrievalError::InvalidConfig("x".into())).exit_code(),
            1
        );
    }

    #[test]
    fn command_names_roundtrip() {
        for c in [
            Command::Ingest,
            Command::Retrieve,
            Command::Localize,
            Command::Stepcap,
            Command::EvalRetrieval,
            Command::EvalSteps,
            Command::Pipeline,
        ] {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert_eq!("train".parse::<Command>().unwrap_err().exit_code(), 1);
    }
}
