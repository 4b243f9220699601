//! The five retrieval strategies over a whole corpus.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fuse_runs, parse_frame_features, rank_videos, score_query_video, sim_final,
    text_to_vision_score, Combine, RetrievalError, RunFile,
};
use crate::clients::{ChatClient, EmbeddingClient, EmbeddingVector, ExpandedAnswer};
use crate::corpus::{tokenize, transcript_text, Corpus, MedicalQuestion, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Original question, max over encoders.
    #[serde(rename = "run1_orig_max", alias = "run1")]
    Run1OrigMax,
    /// Expanded answer text.
    #[serde(rename = "run2_expanded", alias = "run2")]
    Run2Expanded,
    /// Reciprocal-rank fusion of run 1 and run 2.
    #[serde(rename = "run3_fused", alias = "run3")]
    Run3Fused,
    /// Original question, mean over encoders.
    #[serde(rename = "run4_orig_mean", alias = "run4")]
    Run4OrigMean,
    /// Question against precomputed frame features.
    #[serde(rename = "run5_text_to_vision", alias = "run5")]
    Run5TextToVision,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Run1OrigMax => "run1_orig_max",
            Strategy::Run2Expanded => "run2_expanded",
            Strategy::Run3Fused => "run3_fused",
            Strategy::Run4OrigMean => "run4_orig_mean",
            Strategy::Run5TextToVision => "run5_text_to_vision",
        }
    }

    pub fn uses_expansion(&self) -> bool {
        matches!(self, Strategy::Run2Expanded | Strategy::Run3Fused)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "run1" | "run1_orig_max" => Strategy::Run1OrigMax,
            "run2" | "run2_expanded" => Strategy::Run2Expanded,
            "run3" | "run3_fused" => Strategy::Run3Fused,
            "run4" | "run4_orig_mean" => Strategy::Run4OrigMean,
            "run5" | "run5_text_to_vision" => Strategy::Run5TextToVision,
            other => {
                return Err(RetrievalError::InvalidConfig(format!(
                    "unknown strategy {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub encoders: Vec<String>,
    /// Encoder whose space the frame features live in; defaults to the
    /// first text encoder.
    pub vision_encoder: Option<String>,
    pub k: usize,
    pub chunk_tokens: usize,
    pub chunk_stride: usize,
    pub rrf_k: f64,
    pub run_tag: Option<String>,
    /// Score run 2 with the max of original and expanded similarity instead
    /// of the expanded similarity alone.
    pub run2_with_original: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Run1OrigMax,
            encoders: vec!["pubmedbert".into(), "minilm".into()],
            vision_encoder: None,
            k: 10,
            chunk_tokens: 256,
            chunk_stride: 128,
            rrf_k: 60.0,
            run_tag: None,
            run2_with_original: false,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let fail = |m: &str| Err(RetrievalError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.encoders.is_empty() {
            return fail("at least one encoder is required");
        }
        if self.chunk_tokens == 0 || self.chunk_stride == 0 || self.chunk_stride > self.chunk_tokens
        {
            return fail("need 1 <= chunk_stride <= chunk_tokens");
        }
        if self.rrf_k.is_nan() || self.rrf_k <= 0.0 {
            return fail("rrf_k must be positive");
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        self.run_tag
            .clone()
            .unwrap_or_else(|| format!("medvidqa-{}", self.strategy.name()))
    }

    pub fn vision_encoder(&self) -> &str {
        self.vision_encoder.as_deref().unwrap_or(&self.encoders[0])
    }
}

/// Overlapping windows of `size` tokens every `stride` tokens; the last
/// window ends at the final token.
pub fn chunk_tokens(tokens: &[String], size: usize, stride: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    if tokens.is_empty() {
        return chunks;
    }
    let mut start = 0;
    loop {
        let end = (start + size).min(tokens.len());
        chunks.push(tokens[start..end].join(" "));
        if end == tokens.len() {
            break;
        }
        start += stride.max(1);
    }
    chunks
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    pub run: RunFile,
    /// One entry per query when the strategy expands questions.
    pub expansions: Vec<ExpandedAnswer>,
}

/// Scores every query against every video and ranks the top `k`.
pub fn retrieve(
    cfg: &StrategyConfig,
    corpus: &Corpus,
    queries: &[MedicalQuestion],
    embedder: &EmbeddingClient,
    chat: Option<&ChatClient>,
) -> Result<RetrievalOutput, RetrievalError> {
    cfg.validate()?;
    let tag = cfg.tag();
    let expansions = if cfg.strategy.uses_expansion() {
        expand_all(queries, chat)
    } else {
        Vec::new()
    };
    let run = match cfg.strategy {
        Strategy::Run5TextToVision => vision_run(cfg, corpus, queries, embedder, &tag)?,
        _ => text_run(cfg, corpus, queries, &expansions, embedder, &tag)?,
    };
    Ok(RetrievalOutput { run, expansions })
}

fn expand_all(queries: &[MedicalQuestion], chat: Option<&ChatClient>) -> Vec<ExpandedAnswer> {
    queries
        .iter()
        .map(|q| {
            let Some(chat) = chat else {
                return ExpandedAnswer::fallback(&q.query_id, "", "no chat service configured");
            };
            match chat.expand_question(q) {
                Ok(a) if !tokenize(&a.text).is_empty() => a,
                Ok(a) => ExpandedAnswer::fallback(&q.query_id, a.source_model, "empty expansion"),
                Err(e) => {
                    log::warn!(
                        "expansion for {} failed, using the original question: {e}",
                        q.query_id
                    );
                    ExpandedAnswer::fallback(&q.query_id, &chat.config().model, e.to_string())
                }
            }
        })
        .collect()
}

/// Embeds `texts` with every encoder; result is indexed `[text][encoder]`.
fn embed_per_encoder(
    texts: &[String],
    encoders: &[String],
    embedder: &EmbeddingClient,
) -> Result<Vec<Vec<EmbeddingVector>>, RetrievalError> {
    let mut out: Vec<Vec<EmbeddingVector>> = vec![Vec::with_capacity(encoders.len()); texts.len()];
    if texts.is_empty() {
        return Ok(out);
    }
    for enc in encoders {
        for (slot, v) in out.iter_mut().zip(embedder.embed_texts(texts, enc)?) {
            slot.push(v);
        }
    }
    Ok(out)
}

fn text_run(
    cfg: &StrategyConfig,
    corpus: &Corpus,
    queries: &[MedicalQuestion],
    expansions: &[ExpandedAnswer],
    embedder: &EmbeddingClient,
    tag: &str,
) -> Result<RunFile, RetrievalError> {
    let videos: Vec<&VideoRecord> = corpus
        .videos()
        .iter()
        .filter(|v| !v.segments.is_empty())
        .collect();
    let mut chunk_texts = Vec::new();
    let mut chunk_owner = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let tokens = transcript_text(v)?.tokens;
        for chunk in chunk_tokens(&tokens, cfg.chunk_tokens, cfg.chunk_stride) {
            chunk_texts.push(chunk);
            chunk_owner.push(vi);
        }
    }
    // [video][encoder] -> chunk embeddings
    let mut video_chunks: Vec<Vec<Vec<EmbeddingVector>>> =
        vec![vec![Vec::new(); cfg.encoders.len()]; videos.len()];
    for (owner, per_encoder) in
        chunk_owner
            .iter()
            .zip(embed_per_encoder(&chunk_texts, &cfg.encoders, embedder)?)
    {
        for (e, v) in per_encoder.into_iter().enumerate() {
            video_chunks[*owner][e].push(v);
        }
    }

    let q_texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let q_orig = embed_per_encoder(&q_texts, &cfg.encoders, embedder)?;
    let exp_texts: Vec<String> = expansions
        .iter()
        .filter(|a| !a.is_fallback())
        .map(|a| a.text.clone())
        .collect();
    let mut exp_embs = embed_per_encoder(&exp_texts, &cfg.encoders, embedder)?.into_iter();
    let q_exp: HashMap<&str, Vec<EmbeddingVector>> = expansions
        .iter()
        .filter(|a| !a.is_fallback())
        .map(|a| {
            (
                a.query_id.as_str(),
                exp_embs.next().expect("one embedding set per expansion"),
            )
        })
        .collect();

    let score_all = |qembs: &[EmbeddingVector],
                     combine: Combine|
     -> Result<HashMap<String, f64>, RetrievalError> {
        videos
            .iter()
            .zip(&video_chunks)
            .map(|(v, chunks)| {
                Ok((
                    v.video_id.clone(),
                    score_query_video(qembs, chunks, combine)?,
                ))
            })
            .collect()
    };

    let per_query: Vec<RunFile> = queries
        .par_iter()
        .zip(q_orig.par_iter())
        .map(|(q, orig)| {
            let qid = q.query_id.as_str();
            let expanded = || -> Result<HashMap<String, f64>, RetrievalError> {
                let orig_scores = score_all(orig, Combine::Max)?;
                let Some(exp) = q_exp.get(qid) else {
                    return Ok(orig_scores
                        .into_iter()
                        .map(|(v, s)| (v, sim_final(s, None)))
                        .collect());
                };
                let exp_scores = score_all(exp, Combine::Max)?;
                Ok(exp_scores
                    .into_iter()
                    .map(|(v, e)| {
                        let s = if cfg.run2_with_original {
                            sim_final(orig_scores[&v], Some(e))
                        } else {
                            e
                        };
                        (v, s)
                    })
                    .collect())
            };
            let entries = match cfg.strategy {
                Strategy::Run1OrigMax => {
                    rank_videos(qid, &score_all(orig, Combine::Max)?, cfg.k, tag)
                }
                Strategy::Run4OrigMean => {
                    rank_videos(qid, &score_all(orig, Combine::Mean)?, cfg.k, tag)
                }
                Strategy::Run2Expanded => rank_videos(qid, &expanded()?, cfg.k, tag),
                Strategy::Run3Fused => {
                    let run1 = RunFile {
                        entries: rank_videos(qid, &score_all(orig, Combine::Max)?, usize::MAX, tag),
                    };
                    let run2 = RunFile {
                        entries: rank_videos(qid, &expanded()?, usize::MAX, tag),
                    };
                    fuse_runs(&run1, &run2, cfg.rrf_k, tag)
                        .truncate(cfg.k)
                        .entries
                }
                Strategy::Run5TextToVision => unreachable!("vision strategy handled separately"),
            };
            Ok(RunFile { entries })
        })
        .collect::<Result<_, RetrievalError>>()?;
    Ok(RunFile {
        entries: per_query.into_iter().flat_map(|r| r.entries).collect(),
    })
}

fn vision_run(
    cfg: &StrategyConfig,
    corpus: &Corpus,
    queries: &[MedicalQuestion],
    embedder: &EmbeddingClient,
    tag: &str,
) -> Result<RunFile, RetrievalError> {
    let frames = corpus
        .videos()
        .par_iter()
        .filter_map(|v| v.frame_features_path.as_ref().map(|p| (v, p)))
        .map(|(v, path)| {
            let raw = std::fs::read(path)
                .map_err(|e| RetrievalError::Features(format!("{}: {e}", path.display())))?;
            let f = parse_frame_features(&raw)
                .map_err(|e| RetrievalError::Features(format!("{}: {e}", path.display())))?;
            Ok((v.video_id.clone(), f))
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    if frames.is_empty() {
        log::warn!("no video has frame features; the vision run will be empty");
    }
    let q_texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let q_embs = embedder.embed_texts(&q_texts, cfg.vision_encoder())?;
    let per_query: Vec<Vec<_>> = queries
        .par_iter()
        .zip(q_embs.par_iter())
        .map(|(q, emb)| {
            let scores = frames
                .iter()
                .map(|(vid, f)| Ok((vid.clone(), text_to_vision_score(emb, f)?)))
                .collect::<Result<HashMap<_, _>, RetrievalError>>()?;
            Ok(rank_videos(&q.query_id, &scores, cfg.k, tag))
        })
        .collect::<Result<_, RetrievalError>>()?;
    Ok(RunFile {
        entries: per_query.into_iter().flatten().collect(),
    })
}
