//! Time and token spans shared by the corpus, localization, step captioning
//! and evaluation code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for comparing times in seconds.
pub const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid time span [{start_s}, {end_s}]: need 0 <= start < end")]
pub struct InvalidSpan {
    pub start_s: f64,
    pub end_s: f64,
}

/// A half-open interval on the video timeline, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, InvalidSpan> {
        if start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && start_s < end_s {
            Ok(Self { start_s, end_s })
        } else {
            Err(InvalidSpan { start_s, end_s })
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length of the overlap with `other` (0 when disjoint).
    pub fn overlap(&self, other: &TimeSpan) -> f64 {
        (self.end_s.min(other.end_s) - self.start_s.max(other.start_s)).max(0.0)
    }

    /// Intersection, if it has positive length.
    pub fn intersection(&self, other: &TimeSpan) -> Option<TimeSpan> {
        let start = self.start_s.max(other.start_s);
        let end = self.end_s.min(other.end_s);
        (start < end).then_some(TimeSpan {
            start_s: start,
            end_s: end,
        })
    }

    /// True when both spans share an interval of positive length.
    pub fn intersects(&self, other: &TimeSpan) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }

    pub fn approx_eq(&self, other: &TimeSpan) -> bool {
        (self.start_s - other.start_s).abs() <= TIME_EPS
            && (self.end_s - other.end_s).abs() <= TIME_EPS
    }
}

/// Intersection over union of two intervals on the real line.
pub fn temporal_iou(a: &TimeSpan, b: &TimeSpan) -> f64 {
    let inter = a.overlap(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.duration() + b.duration() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Inclusive range of token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start_tok: usize,
    pub end_tok: usize,
}

impl TokenSpan {
    /// Returns `None` when `end_tok < start_tok`.
    pub fn new(start_tok: usize, end_tok: usize) -> Option<Self> {
        (start_tok <= end_tok).then_some(Self { start_tok, end_tok })
    }

    pub fn token_count(&self) -> usize {
        self.end_tok - self.start_tok + 1
    }

    pub fn contains(&self, other: &TokenSpan) -> bool {
        self.start_tok <= other.start_tok && other.end_tok <= self.end_tok
    }

    pub fn intersects(&self, other: &TokenSpan) -> bool {
        self.start_tok <= other.end_tok && other.start_tok <= self.end_tok
    }
}
