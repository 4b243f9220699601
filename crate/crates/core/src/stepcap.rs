//! Query-focused step captioning: merge generated captions with subtitles,
//! ask a chat service to segment the video into steps, then parse and
//! repair the reply.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clients::{ChatClient, ClientError};
use crate::corpus::{
    parse_transcript, CorpusError, GoldStepSet, MedicalQuestion, TranscriptFormat, VideoRecord,
};

pub const STEP_SYSTEM_PROMPT: &str = "You segment medical instructional videos into steps.";
pub const STEP_PROMPT_FOOTER: &str =
    "Return a JSON array of {start, end, step} covering the instructional answer.";
pub const FORMAT_REMINDER: &str =
    "Your previous reply could not be parsed. Reply with only a JSON array of objects \
with numeric \"start\" and \"end\" in seconds and a \"step\" string.";

#[derive(Debug, Error)]
pub enum StepcapError {
    #[error("no captions or subtitles to summarize")]
    NothingToSummarize,
    #[error("no parseable steps in response: {0:?}")]
    UnparseableResponse(String),
    #[error("every step was dropped during validation")]
    NoValidSteps,
    #[error("video duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One instructional step: a time range and its caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCaption {
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    #[serde(rename = "step")]
    pub text: String,
}

/// Declaration order is the merge tie-break: generated before subtitle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Generated,
    Subtitle,
}

impl CaptionSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaptionSource::Generated => "generated",
            CaptionSource::Subtitle => "subtitle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcedCaption {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub source: CaptionSource,
}

pub fn subtitle_captions(video: &VideoRecord) -> Vec<SourcedCaption> {
    video
        .segments
        .iter()
        .map(|s| SourcedCaption {
            start_s: s.start_s,
            end_s: s.end_s,
            text: s.text.clone(),
            source: CaptionSource::Subtitle,
        })
        .collect()
}

/// Reads pre-generated visual captions; the format follows the extension
/// (`.srt`, `.vtt`, or `.json` for yt-json).
pub fn load_generated_captions(path: &Path) -> Result<Vec<SourcedCaption>, CorpusError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default();
    let format: TranscriptFormat = ext.parse().map_err(|e: CorpusError| e.in_file(path))?;
    let raw = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let segments = parse_transcript(&raw, format).map_err(|e| e.in_file(path))?;
    Ok(segments
        .into_iter()
        .map(|s| SourcedCaption {
            start_s: s.start_s,
            end_s: s.end_s,
            text: s.text,
            source: CaptionSource::Generated,
        })
        .collect())
}

/// Union of both lists ordered by (start, end, source); entries with the
/// same start, end and text appear once.
pub fn merge_captions(
    generated: &[SourcedCaption],
    subtitles: &[SourcedCaption],
) -> Vec<SourcedCaption> {
    let mut all: Vec<SourcedCaption> = generated.iter().chain(subtitles).cloned().collect();
    all.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.end_s.total_cmp(&b.end_s))
            .then(a.source.cmp(&b.source))
    });
    let mut out: Vec<SourcedCaption> = Vec::with_capacity(all.len());
    for c in all {
        // duplicates share (start, end) so they sit in one contiguous group
        let dup = out
            .iter()
            .rev()
            .take_while(|o| o.start_s == c.start_s && o.end_s == c.end_s)
            .any(|o| o.text == c.text);
        if !dup {
            out.push(c);
        }
    }
    out
}

/// `(system, user)` prompt pair; byte-identical for identical inputs.
pub fn build_step_prompt(
    question: &MedicalQuestion,
    merged: &[SourcedCaption],
    duration_s: f64,
) -> Result<(String, String), StepcapError> {
    if merged.is_empty() {
        return Err(StepcapError::NothingToSummarize);
    }
    let mut user = format!(
        "Question: {}\nVideo duration: {duration_s:.3} seconds\nCaptions:\n",
        question.text
    );
    for c in merged {
        user.push_str(&format!(
            "[{:.3}\u{2013}{:.3}] ({}) {}\n",
            c.start_s,
            c.end_s,
            c.source.as_str(),
            c.text
        ));
    }
    user.push_str(STEP_PROMPT_FOOTER);
    Ok((STEP_SYSTEM_PROMPT.to_string(), user))
}

/// Steps recovered from a reply, with a note for every entry that was
/// skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSteps {
    pub steps: Vec<StepCaption>,
    pub rejected: Vec<String>,
}

/// Seconds from a JSON number, a numeric string, or `[H:]MM:SS[.fff]`.
fn parse_time(v: &Value) -> Option<f64> {
    let secs = match v {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => parse_clock(s.trim())?,
        _ => return None,
    };
    (secs.is_finite() && secs >= 0.0).then_some(secs)
}

fn parse_clock(s: &str) -> Option<f64> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() > 3 || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    let (last, rest) = parts.split_last()?;
    let mut secs: f64 = last.parse().ok()?;
    if !rest.is_empty() && !(0.0..60.0).contains(&secs) {
        return None;
    }
    let mut scale = 60.0;
    for p in rest.iter().rev() {
        let n: u64 = p.parse().ok()?;
        secs += n as f64 * scale;
        scale *= 60.0;
    }
    Some(secs)
}

fn parse_entry(v: &Value) -> Result<StepCaption, String> {
    let obj = v.as_object().ok_or_else(|| format!("not an object: {v}"))?;
    let time = |key: &str| {
        obj.get(key)
            .and_then(parse_time)
            .ok_or_else(|| format!("bad or missing {key:?} in {v}"))
    };
    let text = obj
        .get("step")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing \"step\" text in {v}"))?;
    if text.trim().is_empty() {
        return Err(format!("empty step text in {v}"));
    }
    Ok(StepCaption {
        start_s: time("start")?,
        end_s: time("end")?,
        text: text.to_string(),
    })
}

/// The outermost `[...]` in the reply, tolerating surrounding prose or code
/// fences.
fn json_array(raw: &str) -> Option<Vec<Value>> {
    let trimmed = raw.trim();
    if let Ok(Value::Array(a)) = serde_json::from_str(trimmed) {
        return Some(a);
    }
    let (a, b) = (trimmed.find('[')?, trimmed.rfind(']')?);
    match serde_json::from_str(trimmed.get(a..=b)?) {
        Ok(Value::Array(items)) => Some(items),
        _ => None,
    }
}

fn line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let clock = r"(\d+(?::\d{2}){1,2}(?:\.\d+)?)";
        Regex::new(&format!(r"^\s*(?:[-*\u{{2022}}]\s+|\d+[.)]\s+)?{clock}\s*[-\u{{2013}}\u{{2014}}]\s*{clock}\s*:\s*(.*\S)\s*$"))
            .expect("valid step line pattern")
    })
}

/// Primary grammar: a JSON array of `{start, end, step}`. Fallback: lines
/// `MM:SS - MM:SS: text`. Steps keep their order in the reply.
pub fn parse_step_response(raw: &str) -> Result<ParsedSteps, StepcapError> {
    let mut steps = Vec::new();
    let mut rejected = Vec::new();
    if let Some(items) = json_array(raw) {
        for item in &items {
            match parse_entry(item) {
                Ok(s) => steps.push(s),
                Err(e) => rejected.push(e),
            }
        }
    }
    if steps.is_empty() {
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let Some(c) = line_regex().captures(line) else {
                continue;
            };
            match (parse_clock(&c[1]), parse_clock(&c[2])) {
                (Some(start_s), Some(end_s)) => steps.push(StepCaption {
                    start_s,
                    end_s,
                    text: c[3].to_string(),
                }),
                _ => rejected.push(format!("bad timestamps in {line:?}")),
            }
        }
    }
    if steps.is_empty() {
        return Err(StepcapError::UnparseableResponse(raw.to_string()));
    }
    Ok(ParsedSteps { steps, rejected })
}

/// Canonical JSON form accepted by `parse_step_response`.
pub fn serialize_steps(steps: &[StepCaption]) -> String {
    serde_json::to_string(steps).expect("steps serialize")
}

/// Sorted, non-overlapping steps inside `[0, duration_s]`. An overlapping
/// step loses its head to the previous step; steps left empty are dropped.
pub fn validate_steps(
    steps: &[StepCaption],
    duration_s: f64,
) -> Result<Vec<StepCaption>, StepcapError> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(StepcapError::InvalidDuration(duration_s));
    }
    let mut sorted: Vec<&StepCaption> = steps.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<StepCaption> = Vec::with_capacity(sorted.len());
    for s in sorted {
        let text = s.text.trim();
        if text.is_empty() || !s.start_s.is_finite() || !s.end_s.is_finite() {
            continue;
        }
        let end = s.end_s.min(duration_s);
        let mut start = s.start_s.max(0.0);
        if let Some(prev) = out.last() {
            start = start.max(prev.end_s);
        }
        if start < end {
            out.push(StepCaption {
                start_s: start,
                end_s: end,
                text: text.to_string(),
            });
        }
    }
    if out.is_empty() {
        return Err(StepcapError::NoValidSteps);
    }
    Ok(out)
}

/// Merge, prompt, complete, parse, validate. An unparseable reply earns one
/// re-prompt with a format reminder.
pub fn run_qfisc(
    video: &VideoRecord,
    question: &MedicalQuestion,
    generated: &[SourcedCaption],
    chat: &ChatClient,
) -> Result<Vec<StepCaption>, StepcapError> {
    let merged = merge_captions(generated, &subtitle_captions(video));
    let (system, user) = build_step_prompt(question, &merged, video.duration_s)?;
    let reply = chat.complete_chat(&system, &user)?;
    let parsed = match parse_step_response(&reply) {
        Ok(p) => p,
        Err(StepcapError::UnparseableResponse(_)) => {
            log::warn!(
                "unparseable step reply for ({}, {}), re-prompting",
                question.query_id,
                video.video_id
            );
            let retry = chat.complete_chat(&system, &format!("{user}\n\n{FORMAT_REMINDER}"))?;
            parse_step_response(&retry)?
        }
        Err(e) => return Err(e),
    };
    for r in &parsed.rejected {
        log::warn!(
            "({}, {}): skipped step entry: {r}",
            question.query_id,
            video.video_id
        );
    }
    validate_steps(&parsed.steps, video.duration_s)
}

#[derive(Serialize)]
struct StepRecord<'a> {
    qid: &'a str,
    vid: &'a str,
    steps: &'a [StepCaption],
}

/// Same schema as the gold steps file.
pub fn write_step_sets(sets: &[GoldStepSet]) -> String {
    let records: Vec<StepRecord<'_>> = sets
        .iter()
        .map(|s| StepRecord {
            qid: &s.query_id,
            vid: &s.video_id,
            steps: &s.steps,
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&records).expect("step sets serialize");
    out.push('\n');
    out
}
