//! Video retrieval: similarity scoring, score and rank fusion, ranking and
//! trec run files.

mod features;
mod runfile;
mod strategy;

use std::collections::HashMap;

use thiserror::Error;

use crate::clients::{ClientError, EmbeddingVector};
use crate::corpus::CorpusError;
pub use features::{parse_frame_features, write_frame_features, FrameFeatures};
pub use runfile::{read_run, write_run, RunEntry, RunFile};
pub use strategy::{chunk_tokens, retrieve, RetrievalOutput, Strategy, StrategyConfig};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("no transcript chunks to score")]
    NoChunks,
    #[error("no frames to score")]
    NoFrames,
    #[error("query and chunk embeddings come from different encoders")]
    EncoderMismatch,
    #[error("frame features: {0}")]
    Features(String),
    #[error("line {line}: {message}")]
    RunLine { line: usize, message: String },
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// How per-encoder similarities are combined into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Max,
    Mean,
}

pub(crate) fn cosine_values(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RetrievalError> {
    cosine_values(&u.values, &v.values)
}

/// Per encoder, the best chunk similarity; then max or mean across encoders.
/// `chunk_embs[e]` holds the chunk embeddings produced by the encoder of
/// `q_embs[e]`.
pub fn score_query_video(
    q_embs: &[EmbeddingVector],
    chunk_embs: &[Vec<EmbeddingVector>],
    combine: Combine,
) -> Result<f64, RetrievalError> {
    if q_embs.is_empty() || q_embs.len() != chunk_embs.len() {
        return Err(RetrievalError::EncoderMismatch);
    }
    let mut per_encoder = Vec::with_capacity(q_embs.len());
    for (q, chunks) in q_embs.iter().zip(chunk_embs) {
        if chunks.is_empty() {
            return Err(RetrievalError::NoChunks);
        }
        let mut best = f64::NEG_INFINITY;
        for c in chunks {
            if c.model_id != q.model_id {
                return Err(RetrievalError::EncoderMismatch);
            }
            best = best.max(cosine(q, c)?);
        }
        per_encoder.push(best);
    }
    Ok(match combine {
        Combine::Max => per_encoder
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        Combine::Mean => per_encoder.iter().sum::<f64>() / per_encoder.len() as f64,
    })
}

/// Larger of the original-question and expanded-answer similarities; the
/// original alone when no expansion is available.
pub fn sim_final(sim_orig: f64, sim_expanded: Option<f64>) -> f64 {
    match sim_expanded {
        Some(e) if e > sim_orig => e,
        _ => sim_orig,
    }
}

/// Best cosine between the query and any frame row.
pub fn text_to_vision_score(
    q_emb: &EmbeddingVector,
    frames: &FrameFeatures,
) -> Result<f64, RetrievalError> {
    frame_similarities(q_emb, frames)?
        .into_iter()
        .reduce(f64::max)
        .ok_or(RetrievalError::NoFrames)
}

/// Cosine between the query and each frame row, in frame order.
pub fn frame_similarities(
    q_emb: &EmbeddingVector,
    frames: &FrameFeatures,
) -> Result<Vec<f64>, RetrievalError> {
    if frames.rows.is_empty() {
        return Err(RetrievalError::NoFrames);
    }
    frames
        .rows
        .iter()
        .map(|row| cosine_values(&q_emb.values, row))
        .collect()
}

/// Orders videos by descending score, ties by ascending id, and keeps the
/// top `k`.
pub fn rank_videos(
    query_id: &str,
    scores: &HashMap<String, f64>,
    k: usize,
    run_tag: &str,
) -> Vec<RunEntry> {
    let mut ordered: Vec<(&String, f64)> = scores.iter().map(|(v, s)| (v, *s)).collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ordered
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (video_id, score))| RunEntry {
            query_id: query_id.to_string(),
            video_id: video_id.clone(),
            rank: i + 1,
            score,
            run_tag: run_tag.to_string(),
        })
        .collect()
}

/// Reciprocal-rank fusion of two runs: each video scores
/// `Σ 1 / (rrf_k + rank)` over the runs that retrieved it. Queries present
/// in only one run are fused from that run alone.
pub fn fuse_runs(a: &RunFile, b: &RunFile, rrf_k: f64, run_tag: &str) -> RunFile {
    let mut query_order: Vec<&str> = Vec::new();
    let mut fused: HashMap<&str, HashMap<String, f64>> = HashMap::new();
    for run in [a, b] {
        for e in &run.entries {
            let per_query = fused.entry(e.query_id.as_str()).or_insert_with(|| {
                query_order.push(e.query_id.as_str());
                HashMap::new()
            });
            *per_query.entry(e.video_id.clone()).or_insert(0.0) += 1.0 / (rrf_k + e.rank as f64);
        }
    }
    // a fixed query order independent of argument order
    query_order.sort_unstable();
    let entries = query_order
        .into_iter()
        .flat_map(|q| rank_videos(q, &fused[q], usize::MAX, run_tag))
        .collect();
    RunFile { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(model: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(model, values.to_vec()).unwrap()
    }

    /// Embeddings in the plane with a prescribed cosine to (1, 0).
    fn at_cos(model: &str, c: f64) -> EmbeddingVector {
        ev(model, &[c, (1.0 - c * c).sqrt()])
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_fixtures() {
        assert!(
            (cosine(&ev("m", &[3.0, 4.0]), &ev("m", &[3.0, 4.0])).unwrap() - 1.0).abs() < 1e-12
        );
        assert_eq!(
            cosine(&ev("m", &[1.0, 0.0]), &ev("m", &[0.0, 1.0])).unwrap(),
            0.0
        );
        assert!(
            (cosine(&ev("m", &[1.0, 0.0]), &ev("m", &[1.0, 1.0])).unwrap() - 0.70710678).abs()
                < 1e-8
        );
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_values(&[0.0, 0.0], &[1.0, 0.0]),
            Err(RetrievalError::ZeroVector)
        ));
        assert!(matches!(
            cosine_values(&[1.0], &[1.0, 0.0]),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn score_max_and_mean() {
        let q = vec![ev("e1", &[1.0, 0.0]), ev("e2", &[1.0, 0.0])];
        let chunks = vec![
            vec![at_cos("e1", 0.2), at_cos("e1", 0.6)],
            vec![at_cos("e2", 0.5), at_cos("e2", 0.4)],
        ];
        assert!((score_query_video(&q, &chunks, Combine::Max).unwrap() - 0.6).abs() < 1e-12);
        assert!((score_query_video(&q, &chunks, Combine::Mean).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn score_degenerate_and_errors() {
        let q = vec![ev("e", &[1.0, 0.0])];
        let c = at_cos("e", 0.3);
        let direct = cosine(&q[0], &c).unwrap();
        assert_eq!(
            score_query_video(&q, &[vec![c]], Combine::Max).unwrap(),
            direct
        );
        assert!(matches!(
            score_query_video(&q, &[vec![]], Combine::Max),
            Err(RetrievalError::NoChunks)
        ));
        assert!(matches!(
            score_query_video(&q, &[vec![at_cos("other", 0.3)]], Combine::Max),
            Err(RetrievalError::EncoderMismatch)
        ));
    }

    #[test]
    fn sim_final_cases() {
        assert_eq!(sim_final(0.3, Some(0.5)), 0.5);
        assert_eq!(sim_final(0.4, Some(0.4)), 0.4);
        assert_eq!(sim_final(0.3, None), 0.3);
    }

    #[test]
    fn rank_ties_by_id_and_truncation() {
        let scores: HashMap<String, f64> = [("v_b", 0.9), ("v_a", 0.9), ("v_c", 0.1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let top = rank_videos("q", &scores, 2, "t");
        assert_eq!(
            top.iter()
                .map(|e| (e.video_id.as_str(), e.rank))
                .collect::<Vec<_>>(),
            vec![("v_a", 1), ("v_b", 2)]
        );
        assert_eq!(rank_videos("q", &scores, 10, "t").len(), 3);
        assert!(rank_videos("q", &HashMap::new(), 10, "t").is_empty());
    }

    fn run(q: &str, vids: &[&str]) -> RunFile {
        let scores = vids
            .iter()
            .enumerate()
            .map(|(i, v)| (v.to_string(), 1.0 - i as f64 * 0.1))
            .collect();
        RunFile {
            entries: rank_videos(q, &scores, usize::MAX, "x"),
        }
    }

    #[test]
    fn rrf_fixture() {
        let a = run("q1", &["v", "w"]);
        let b = run("q1", &["w", "v"]);
        let fused = fuse_runs(&a, &b, 60.0, "f");
        for e in &fused.entries {
            assert!((e.score - (1.0 / 61.0 + 1.0 / 62.0)).abs() < 1e-8, "{e:?}");
        }
        let single = fuse_runs(&run("q1", &["v"]), &RunFile::default(), 60.0, "f");
        assert!((single.entries[0].score - 1.0 / 61.0).abs() < 1e-15);
    }

    #[test]
    fn rrf_of_identical_runs_keeps_order() {
        let a = run("q1", &["c", "a", "d", "b"]);
        let fused = fuse_runs(&a, &a, 60.0, "f");
        let order: Vec<_> = fused.entries.iter().map(|e| e.video_id.as_str()).collect();
        assert_eq!(order, vec!["c", "a", "d", "b"]);
    }

    #[test]
    fn vision_score_is_max_over_frames() {
        let q = ev("m", &[1.0, 0.0]);
        let frames = FrameFeatures::new(vec![
            at_cos("m", 0.1).values,
            at_cos("m", 0.5).values,
            at_cos("m", 0.3).values,
        ])
        .unwrap();
        assert!((text_to_vision_score(&q, &frames).unwrap() - 0.5).abs() < 1e-12);
        let same = FrameFeatures::new(vec![vec![2.0, 0.0]; 3]).unwrap();
        assert_eq!(text_to_vision_score(&q, &same).unwrap(), 1.0);
        let empty = FrameFeatures {
            dim: 2,
            rows: vec![],
        };
        assert!(matches!(
            text_to_vision_score(&q, &empty),
            Err(RetrievalError::NoFrames)
        ));
    }

    proptest! {
        #[test]
        fn sim_final_is_max(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let s = sim_final(a, Some(b));
            prop_assert!(s >= a && s >= b);
            prop_assert!(s == a || s == b);
        }

        #[test]
        fn rank_output_is_well_formed(scores in prop::collection::hash_map("[a-f]{1,3}", -1.0f64..1.0, 0..20), k in 1usize..25) {
            let ranked = rank_videos("q", &scores, k, "t");
            prop_assert_eq!(ranked.len(), k.min(scores.len()));
            for (i, e) in ranked.iter().enumerate() {
                prop_assert_eq!(e.rank, i + 1);
            }
            for w in ranked.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn mean_never_exceeds_max(sims in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 1..5), 1..4)) {
            let q: Vec<_> = (0..sims.len()).map(|e| ev(&format!("e{e}"), &[1.0, 0.0])).collect();
            let chunks: Vec<Vec<_>> = sims
                .iter()
                .enumerate()
                .map(|(e, cs)| cs.iter().map(|&c| at_cos(&format!("e{e}"), c)).collect())
                .collect();
            let mean = score_query_video(&q, &chunks, Combine::Mean).unwrap();
            let max = score_query_video(&q, &chunks, Combine::Max).unwrap();
            prop_assert!(mean <= max + 1e-12);
        }
    }
}
