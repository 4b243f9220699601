//! Video corpus, questions and ground truth.
//!
//! Transcripts come from local subtitle files (SRT, WebVTT or the JSON
//! layout produced by YouTube transcript exporters). Every consumer that
//! needs token positions goes through [`tokenize`] so that retrieval chunks
//! and the localization lookup table agree on token indices.

mod files;
mod subtitles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::span::{TimeSpan, TokenSpan};
use crate::stepcap::StepCaption;

pub use files::{
    load_corpus, load_gold_steps, load_qrels, load_topics, parse_gold_steps, parse_qrels,
    parse_topics, ManifestEntry,
};
pub use subtitles::{format_timestamp, parse_transcript, to_srt, to_vtt, TranscriptFormat};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("line {line}: malformed timestamp {value:?}")]
    MalformedTimestamp { line: usize, value: String },
    #[error("line {line}: malformed cue: {reason}")]
    MalformedCue { line: usize, reason: String },
    #[error("missing WEBVTT header")]
    MissingHeader,
    #[error("invalid yt-json transcript: {0}")]
    InvalidYtJson(String),
    #[error("video has no transcript segments")]
    EmptyTranscript,
    #[error("line {line}: duplicate judgment for ({query_id}, {video_id})")]
    DuplicateJudgment {
        line: usize,
        query_id: String,
        video_id: String,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (CorpusError::InFile { .. } | CorpusError::Io { .. }) => e,
            e => CorpusError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

/// One subtitle cue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    /// 1-based position in the sorted segment list.
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl TranscriptSegment {
    pub fn span(&self) -> TimeSpan {
        TimeSpan {
            start_s: self.start_s,
            end_s: self.end_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration_s: f64,
    pub segments: Vec<TranscriptSegment>,
    pub frame_features_path: Option<PathBuf>,
    /// Pre-generated visual captions for step captioning, if supplied.
    pub captions_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalQuestion {
    pub query_id: String,
    pub text: String,
}

impl MedicalQuestion {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let query_id = query_id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CorpusError::Invalid(format!(
                "question {query_id} has empty text"
            )));
        }
        Ok(Self { query_id, text })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrelEntry {
    pub query_id: String,
    pub video_id: String,
    pub relevance: u32,
    pub gold_span: Option<TimeSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStepSet {
    pub query_id: String,
    pub video_id: String,
    pub steps: Vec<StepCaption>,
}

/// An immutable, id-indexed collection of videos.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    videos: Vec<VideoRecord>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(videos: Vec<VideoRecord>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for (i, v) in videos.iter().enumerate() {
            if by_id.insert(v.video_id.clone(), i).is_some() {
                return Err(CorpusError::Invalid(format!(
                    "duplicate video id {}",
                    v.video_id
                )));
            }
            let max_end = v.segments.iter().map(|s| s.end_s).fold(0.0, f64::max);
            if v.duration_s + crate::span::TIME_EPS < max_end {
                return Err(CorpusError::Invalid(format!(
                    "video {}: duration {} shorter than last cue end {}",
                    v.video_id, v.duration_s, max_end
                )));
            }
        }
        Ok(Self { videos, by_id })
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.by_id.get(video_id).map(|&i| &self.videos[i])
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Lowercase split on Unicode whitespace; empty tokens never appear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Concatenated transcript with per-segment token ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptText {
    pub full_text: String,
    pub tokens: Vec<String>,
    /// `(segment position, inclusive token range)` for every segment.
    pub token_offsets: Vec<(usize, TokenSpan)>,
}

pub fn transcript_text(video: &VideoRecord) -> Result<TranscriptText, CorpusError> {
    if video.segments.is_empty() {
        return Err(CorpusError::EmptyTranscript);
    }
    let mut tokens = Vec::new();
    let mut token_offsets = Vec::with_capacity(video.segments.len());
    for (i, seg) in video.segments.iter().enumerate() {
        let seg_tokens = tokenize(&seg.text);
        if seg_tokens.is_empty() {
            return Err(CorpusError::Invalid(format!(
                "video {}: segment {} has no tokens",
                video.video_id, seg.index
            )));
        }
        let first = tokens.len();
        tokens.extend(seg_tokens);
        token_offsets.push((
            i,
            TokenSpan {
                start_tok: first,
                end_tok: tokens.len() - 1,
            },
        ));
    }
    let full_text = video
        .segments
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(TranscriptText {
        full_text,
        tokens,
        token_offsets,
    })
}

#[cfg(test)]
pub(crate) fn test_video(id: &str, cues: &[(f64, f64, &str)]) -> VideoRecord {
    let segments = cues
        .iter()
        .enumerate()
        .map(|(i, &(a, b, t))| TranscriptSegment {
            index: i + 1,
            start_s: a,
            end_s: b,
            text: t.to_string(),
        })
        .collect::<Vec<_>>();
    let duration_s = segments.iter().map(|s| s.end_s).fold(0.0, f64::max);
    VideoRecord {
        video_id: id.to_string(),
        duration_s,
        segments,
        frame_features_path: None,
        captions_path: None,
    }
}
