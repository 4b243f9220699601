//! Corpus manifest, topics, qrels and gold step files.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_transcript, Corpus, CorpusError, GoldStepSet, MedicalQuestion, QrelEntry,
    TranscriptFormat, VideoRecord,
};
use crate::span::TimeSpan;
use crate::stepcap::StepCaption;

/// Name of the manifest file inside a corpus directory.
pub const MANIFEST: &str = "videos.json";

/// One entry of `videos.json`. Paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub vid: String,
    pub transcript: String,
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<String>,
}

fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_string(path: &Path) -> Result<String, CorpusError> {
    String::from_utf8(read(path)?).map_err(|_| CorpusError::InvalidUtf8.in_file(path))
}

/// Loads `<dir>/videos.json` and every transcript it names.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let manifest_path = dir.join(MANIFEST);
    let raw = read_string(&manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&raw)
        .map_err(|e| CorpusError::Invalid(e.to_string()).in_file(&manifest_path))?;
    let mut videos = Vec::with_capacity(entries.len());
    for entry in entries {
        let transcript_path = dir.join(&entry.transcript);
        let format: TranscriptFormat = entry
            .format
            .parse()
            .map_err(|e: CorpusError| e.in_file(&manifest_path))?;
        let segments = parse_transcript(&read(&transcript_path)?, format)
            .map_err(|e| e.in_file(&transcript_path))?;
        let last_end = segments.iter().map(|s| s.end_s).fold(0.0, f64::max);
        videos.push(VideoRecord {
            video_id: entry.vid,
            duration_s: entry.duration.unwrap_or(last_end),
            segments,
            frame_features_path: entry.features.map(|p| dir.join(p)),
            captions_path: entry.captions.map(|p| dir.join(p)),
        });
    }
    Corpus::new(videos).map_err(|e| e.in_file(&manifest_path))
}

#[derive(Deserialize)]
struct TopicRecord {
    qid: String,
    question: String,
}

pub fn parse_topics(raw: &str) -> Result<Vec<MedicalQuestion>, CorpusError> {
    let records: Vec<TopicRecord> =
        serde_json::from_str(raw).map_err(|e| CorpusError::Invalid(e.to_string()))?;
    let mut seen = HashSet::new();
    records
        .into_iter()
        .map(|r| {
            if !seen.insert(r.qid.clone()) {
                return Err(CorpusError::Invalid(format!("duplicate topic {}", r.qid)));
            }
            MedicalQuestion::new(r.qid, r.question)
        })
        .collect()
}

pub fn load_topics(path: &Path) -> Result<Vec<MedicalQuestion>, CorpusError> {
    parse_topics(&read_string(path)?).map_err(|e| e.in_file(path))
}

/// `query_id 0 video_id relevance [start_s end_s]`, one judgment per line.
/// Blank lines and `#` comments are skipped.
pub fn parse_qrels(raw: &str) -> Result<Vec<QrelEntry>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| CorpusError::Line {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 6 {
            return Err(bad(format!(
                "expected 4 or 6 fields, found {}",
                fields.len()
            )));
        }
        let relevance: u32 = fields[3]
            .parse()
            .map_err(|_| bad(format!("bad relevance {:?}", fields[3])))?;
        let gold_span = if fields.len() == 6 {
            let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad time {s:?}")));
            let (a, b) = (parse(fields[4])?, parse(fields[5])?);
            Some(TimeSpan::new(a, b).map_err(|e| bad(e.to_string()))?)
        } else {
            None
        };
        let (query_id, video_id) = (fields[0].to_string(), fields[2].to_string());
        if !seen.insert((query_id.clone(), video_id.clone())) {
            return Err(CorpusError::DuplicateJudgment {
                line: line_no,
                query_id,
                video_id,
            });
        }
        out.push(QrelEntry {
            query_id,
            video_id,
            relevance,
            gold_span,
        });
    }
    Ok(out)
}

pub fn load_qrels(path: &Path) -> Result<Vec<QrelEntry>, CorpusError> {
    parse_qrels(&read_string(path)?).map_err(|e| e.in_file(path))
}

#[derive(Deserialize)]
struct GoldRecord {
    qid: String,
    vid: String,
    steps: Vec<StepCaption>,
}

pub fn parse_gold_steps(raw: &str) -> Result<Vec<GoldStepSet>, CorpusError> {
    let records: Vec<GoldRecord> =
        serde_json::from_str(raw).map_err(|e| CorpusError::Invalid(e.to_string()))?;
    let mut seen = HashSet::new();
    records
        .into_iter()
        .map(|r| {
            if !seen.insert((r.qid.clone(), r.vid.clone())) {
                return Err(CorpusError::Invalid(format!(
                    "duplicate gold steps for ({}, {})",
                    r.qid, r.vid
                )));
            }
            let mut steps = r.steps;
            steps.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            Ok(GoldStepSet {
                query_id: r.qid,
                video_id: r.vid,
                steps,
            })
        })
        .collect()
}

pub fn load_gold_steps(path: &Path) -> Result<Vec<GoldStepSet>, CorpusError> {
    parse_gold_steps(&read_string(path)?).map_err(|e| e.in_file(path))
}
