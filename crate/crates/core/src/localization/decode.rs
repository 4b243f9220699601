use super::{token_span_to_time, LocalizationError, LookupTable, Modality, SpanPrediction};
use crate::clients::EmbeddingVector;
use crate::retrieval::cosine;
use crate::span::{TimeSpan, TokenSpan};

/// Per-position start and end logits from a span predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    start_scores: Vec<f64>,
    end_scores: Vec<f64>,
}

impl ScoreSequence {
    pub fn new(start_scores: Vec<f64>, end_scores: Vec<f64>) -> Result<Self, LocalizationError> {
        if start_scores.is_empty() {
            return Err(LocalizationError::EmptySequence);
        }
        if start_scores.len() != end_scores.len() {
            return Err(LocalizationError::InvalidScores(format!(
                "{} start scores but {} end scores",
                start_scores.len(),
                end_scores.len()
            )));
        }
        if start_scores
            .iter()
            .chain(&end_scores)
            .any(|v| !v.is_finite())
        {
            return Err(LocalizationError::InvalidScores("non-finite score".into()));
        }
        Ok(Self {
            start_scores,
            end_scores,
        })
    }

    pub fn positions(&self) -> usize {
        self.start_scores.len()
    }

    pub fn start_scores(&self) -> &[f64] {
        &self.start_scores
    }

    pub fn end_scores(&self) -> &[f64] {
        &self.end_scores
    }

    /// Start/end scores whose pair score `start[i] + end[j]` is the sum of
    /// `values[i..=j]`, so decoding picks the maximum-sum window.
    pub fn from_window_sums(values: &[f64]) -> Result<Self, LocalizationError> {
        let mut prefix = Vec::with_capacity(values.len() + 1);
        prefix.push(0.0);
        for v in values {
            prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
        }
        let start = prefix[..values.len()].iter().map(|p| -p).collect();
        let end = prefix[1..].to_vec();
        Self::new(start, end)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Best pair `(i, j)` with `i <= j`, its probability under a softmax over
/// all valid pairs. Ties prefer the smallest `i`, then the smallest `j`.
pub fn decode_pair(s: &ScoreSequence) -> (TokenSpan, f64) {
    let (start, end) = (&s.start_scores, &s.end_scores);
    let mut best_i = 0;
    let mut best: Option<(usize, usize, f64)> = None;
    // log-sum-exp of start[0..=j]
    let mut lse_start = f64::NEG_INFINITY;
    let mut lse_all = f64::NEG_INFINITY;
    for j in 0..start.len() {
        if start[j] > start[best_i] {
            best_i = j;
        }
        lse_start = log_add_exp(lse_start, start[j]);
        lse_all = log_add_exp(lse_all, lse_start + end[j]);
        let score = start[best_i] + end[j];
        let better = match best {
            None => true,
            Some((bi, _, bs)) => score > bs || (score == bs && best_i < bi),
        };
        if better {
            best = Some((best_i, j, score));
        }
    }
    let (i, j, score) = best.expect("non-empty sequence");
    let confidence = (score - lse_all).exp().clamp(0.0, 1.0);
    (
        TokenSpan {
            start_tok: i,
            end_tok: j,
        },
        confidence,
    )
}

pub fn predict_span_from_scores(
    s: &ScoreSequence,
    table: &LookupTable,
    modality: Modality,
) -> Result<SpanPrediction, LocalizationError> {
    let (tokens, confidence) = decode_pair(s);
    let span = token_span_to_time(table, &tokens)?;
    Ok(SpanPrediction {
        span,
        confidence,
        modality,
    })
}

/// Edge-truncated centered moving average.
pub fn smooth(scores: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..scores.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(scores.len() - 1);
            scores[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Inclusive segment range of the highest-total contiguous run at or above
/// the threshold, plus its mean score. Ties go to the earliest run.
pub fn select_run(smoothed: &[f64], tau: f64) -> Option<(usize, usize, f64)> {
    let max = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    // never above the maximum, so at least one segment qualifies
    let threshold = if max >= 0.0 { tau * max } else { max / tau };
    let mut best: Option<(usize, usize, f64)> = None;
    let mut i = 0;
    while i < smoothed.len() {
        if smoothed[i] < threshold {
            i += 1;
            continue;
        }
        let start = i;
        let mut total = 0.0;
        while i < smoothed.len() && smoothed[i] >= threshold {
            total += smoothed[i];
            i += 1;
        }
        if best.is_none_or(|(_, _, t)| total > t) {
            best = Some((start, i - 1, total));
        }
    }
    best.map(|(a, b, total)| (a, b, total / (b - a + 1) as f64))
}

/// Textual span from per-segment similarity to the question.
pub fn segment_relevance_localizer(
    q_emb: &EmbeddingVector,
    segment_embs: &[EmbeddingVector],
    segment_spans: &[TimeSpan],
    window: usize,
    tau: f64,
) -> Result<SpanPrediction, LocalizationError> {
    if segment_embs.is_empty() {
        return Err(LocalizationError::NoSegments);
    }
    if segment_embs.len() != segment_spans.len() {
        return Err(LocalizationError::InvalidScores(
            "one time span per segment embedding is required".into(),
        ));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(LocalizationError::InvalidConfig(format!(
            "window must be odd, got {window}"
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LocalizationError::InvalidConfig(format!(
            "tau must be in (0, 1], got {tau}"
        )));
    }
    let scores = segment_embs
        .iter()
        .map(|s| cosine(q_emb, s))
        .collect::<Result<Vec<_>, _>>()?;
    let smoothed = smooth(&scores, window);
    let (a, b, mean) = select_run(&smoothed, tau).ok_or(LocalizationError::NoSegments)?;
    let run = &segment_spans[a..=b];
    let span = TimeSpan {
        start_s: run.iter().map(|s| s.start_s).fold(f64::INFINITY, f64::min),
        end_s: run
            .iter()
            .map(|s| s.end_s)
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(SpanPrediction {
        span,
        confidence: mean.clamp(0.0, 1.0),
        modality: Modality::Textual,
    })
}
