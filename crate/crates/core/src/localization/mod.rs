//! Temporal answer localization: span decoding over predictor scores, the
//! token/time lookup table, IoU-gated reconciliation of the visual and
//! textual predictions, and loss composition.

mod decode;
mod lookup;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::EmbeddingVector;
use crate::corpus::{CorpusError, VideoRecord};
use crate::retrieval::{frame_similarities, FrameFeatures, RetrievalError};
use crate::span::{temporal_iou, InvalidSpan, TimeSpan, TokenSpan};
pub use decode::{
    decode_pair, predict_span_from_scores, segment_relevance_localizer, select_run, smooth,
    ScoreSequence,
};
pub use lookup::{build_lookup, time_span_to_tokens, token_span_to_time, LookupRow, LookupTable};

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("video has no transcript segments")]
    EmptyTranscript,
    #[error("token index {index} out of range for {token_count} tokens")]
    TokenOutOfRange { index: usize, token_count: usize },
    #[error("time span [{start_s}, {end_s}] overlaps no lookup row")]
    NoCoverage { start_s: f64, end_s: f64 },
    #[error("empty score sequence")]
    EmptySequence,
    #[error("no segments to localize over")]
    NoSegments,
    #[error("negative loss term {0}")]
    NegativeLoss(f64),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("invalid lookup table: {0}")]
    InvalidTable(String),
    #[error("invalid localization config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    OutputLine { line: usize, message: String },
    #[error(transparent)]
    Span(#[from] InvalidSpan),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Corpus(CorpusError),
}

impl From<CorpusError> for LocalizationError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::EmptyTranscript => LocalizationError::EmptyTranscript,
            other => LocalizationError::Corpus(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub span: TimeSpan,
    /// In `[0, 1]`.
    pub confidence: f64,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDecision {
    None,
    VisualTeachesTextual,
    TextualTeachesVisual,
}

/// Which predictor, if any, should teach the other. Agreement at or above
/// `theta` IoU needs no transfer; otherwise the strictly more confident
/// predictor teaches.
pub fn one_way_gate(vis: &SpanPrediction, txt: &SpanPrediction, theta: f64) -> TransferDecision {
    if temporal_iou(&vis.span, &txt.span) >= theta {
        return TransferDecision::None;
    }
    if vis.confidence > txt.confidence {
        TransferDecision::VisualTeachesTextual
    } else if txt.confidence > vis.confidence {
        TransferDecision::TextualTeachesVisual
    } else {
        TransferDecision::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransferTarget {
    Tokens(TokenSpan),
    Time(TimeSpan),
}

/// The teacher's span expressed in the student's coordinates: tokens for a
/// textual student, lookup-aligned time for a visual one.
pub fn transfer_targets(
    teacher: &SpanPrediction,
    table: &LookupTable,
) -> Result<TransferTarget, LocalizationError> {
    let tokens = time_span_to_tokens(table, &teacher.span)?;
    match teacher.modality {
        Modality::Visual => Ok(TransferTarget::Tokens(tokens)),
        Modality::Textual => Ok(TransferTarget::Time(token_span_to_time(table, &tokens)?)),
    }
}

/// Sum of the predictor losses and the transfer losses; a gated-off transfer
/// term is passed as 0.
pub fn total_loss(
    l_visual: f64,
    l_textual: f64,
    l_transfer_visual: f64,
    l_transfer_textual: f64,
) -> Result<f64, LocalizationError> {
    let terms = [l_visual, l_textual, l_transfer_visual, l_transfer_textual];
    if let Some(bad) = terms.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(LocalizationError::NegativeLoss(*bad));
    }
    Ok(l_visual + l_textual + (l_transfer_visual + l_transfer_textual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    /// IoU at or above which the two predictions agree.
    pub theta: f64,
    /// Odd moving-average width over segment scores.
    pub window: usize,
    /// Fraction of the best smoothed score a segment needs to be selected.
    pub tau: f64,
    /// Encoder for questions, segments and frames; defaults to the first
    /// retrieval encoder.
    pub encoder: Option<String>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            window: 3,
            tau: 0.8,
            encoder: None,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(LocalizationError::InvalidConfig(format!(
                "theta must be in [0, 1], got {}",
                self.theta
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(LocalizationError::InvalidConfig(format!(
                "window must be odd, got {}",
                self.window
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LocalizationError::InvalidConfig(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Everything one localization job reads; embeddings share one encoder.
#[derive(Debug, Clone, Copy)]
pub struct LocalizeInputs<'a> {
    pub video: &'a VideoRecord,
    pub q_emb: &'a EmbeddingVector,
    /// One per transcript segment, in segment order.
    pub segment_embs: &'a [EmbeddingVector],
    pub frames: Option<&'a FrameFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub prediction: SpanPrediction,
    pub textual: SpanPrediction,
    pub visual: Option<SpanPrediction>,
    pub iou: Option<f64>,
    pub decision: Option<TransferDecision>,
}

/// Frame-level prediction: centered query/frame similarities decoded as the
/// maximum-sum window over a uniform frame timeline.
pub fn visual_prediction(
    q_emb: &EmbeddingVector,
    frames: &FrameFeatures,
    duration_s: f64,
) -> Result<SpanPrediction, LocalizationError> {
    let sims = frame_similarities(q_emb, frames)?;
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let centered: Vec<f64> = sims.iter().map(|s| s - mean).collect();
    let seq = ScoreSequence::from_window_sums(&centered)?;
    let table = LookupTable::uniform_frames(frames.frame_count(), duration_s)?;
    predict_span_from_scores(&seq, &table, Modality::Visual)
}

/// Combines the two predictions: agreement yields the intersection with the
/// mean confidence; disagreement yields the gate teacher's span, and the
/// textual span when no teacher is chosen.
pub fn reconcile(
    vis: &SpanPrediction,
    txt: &SpanPrediction,
    theta: f64,
) -> (SpanPrediction, f64, TransferDecision) {
    let iou = temporal_iou(&vis.span, &txt.span);
    let decision = one_way_gate(vis, txt, theta);
    let prediction = if iou >= theta {
        match vis.span.intersection(&txt.span) {
            Some(span) => SpanPrediction {
                span,
                confidence: (vis.confidence + txt.confidence) / 2.0,
                modality: Modality::Textual,
            },
            None => *txt,
        }
    } else {
        match decision {
            TransferDecision::VisualTeachesTextual => *vis,
            _ => *txt,
        }
    };
    (prediction, iou, decision)
}

pub fn localize(
    inputs: LocalizeInputs<'_>,
    cfg: &LocalizeConfig,
) -> Result<Localization, LocalizationError> {
    cfg.validate()?;
    let video = inputs.video;
    if video.segments.is_empty() {
        return Err(LocalizationError::EmptyTranscript);
    }
    let spans: Vec<TimeSpan> = video.segments.iter().map(|s| s.span()).collect();
    let textual = segment_relevance_localizer(
        inputs.q_emb,
        inputs.segment_embs,
        &spans,
        cfg.window,
        cfg.tau,
    )?;
    let Some(frames) = inputs.frames.filter(|f| f.frame_count() > 0) else {
        return Ok(Localization {
            prediction: textual,
            textual,
            visual: None,
            iou: None,
            decision: None,
        });
    };
    let visual = visual_prediction(inputs.q_emb, frames, video.duration_s)?;
    let (prediction, iou, decision) = reconcile(&visual, &textual, cfg.theta);
    Ok(Localization {
        prediction,
        textual,
        visual: Some(visual),
        iou: Some(iou),
        decision: Some(decision),
    })
}

/// One line of a localization file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub query_id: String,
    pub video_id: String,
    pub span: TimeSpan,
    pub confidence: f64,
}

/// `query_id video_id start_s end_s confidence`, seconds to 3 decimals and
/// confidence to 4.
pub fn write_localizations(records: &[LocalizationRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{} {} {:.3} {:.3} {:.4}\n",
                r.query_id, r.video_id, r.span.start_s, r.span.end_s, r.confidence
            )
        })
        .collect()
}

pub fn read_localizations(raw: &str) -> Result<Vec<LocalizationRecord>, LocalizationError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| LocalizationError::OutputLine {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number {s:?}")))
        };
        let span = TimeSpan::new(num(f[2])?, num(f[3])?).map_err(|e| bad(e.to_string()))?;
        let confidence = num(f[4])?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(bad(format!("confidence {confidence} outside [0, 1]")));
        }
        out.push(LocalizationRecord {
            query_id: f[0].into(),
            video_id: f[1].into(),
            span,
            confidence,
        });
    }
    Ok(out)
}
