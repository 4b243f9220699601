//! SRT, WebVTT and yt-json transcript parsing plus canonical serializers.

use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use super::{CorpusError, TranscriptSegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranscriptFormat {
    Srt,
    Vtt,
    YtJson,
}

impl FromStr for TranscriptFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "srt" => Ok(Self::Srt),
            "vtt" | "webvtt" => Ok(Self::Vtt),
            "yt-json" | "ytjson" | "json" => Ok(Self::YtJson),
            other => Err(CorpusError::Invalid(format!(
                "unknown transcript format {other:?}"
            ))),
        }
    }
}

/// Parse a transcript in the given format. Cues come back stably sorted by
/// start time with `index` set to their 1-based position.
pub fn parse_transcript(
    raw: &[u8],
    format: TranscriptFormat,
) -> Result<Vec<TranscriptSegment>, CorpusError> {
    let text = std::str::from_utf8(raw).map_err(|_| CorpusError::InvalidUtf8)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut cues = match format {
        TranscriptFormat::Srt => parse_srt(text)?,
        TranscriptFormat::Vtt => parse_vtt(text)?,
        TranscriptFormat::YtJson => parse_yt_json(text)?,
    };
    cues.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for (i, c) in cues.iter_mut().enumerate() {
        c.index = i + 1;
    }
    Ok(cues)
}

fn ms_to_s(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

fn s_to_ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}

/// `[HH:]MM:SS<sep>mmm` to milliseconds.
fn parse_timestamp(raw: &str, separators: &[char]) -> Option<u64> {
    let (clock, frac) = raw.rsplit_once(|c| separators.contains(&c))?;
    if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let parts: Vec<&str> = clock.split(':').collect();
    let (h, m, s) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] => ("0", *m, *s),
        _ => return None,
    };
    let digits = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit());
    if !digits(h) || m.len() != 2 || s.len() != 2 || !digits(m) || !digits(s) {
        return None;
    }
    let (h, m, s): (u64, u64, u64) = (h.parse().ok()?, m.parse().ok()?, s.parse().ok()?);
    if m >= 60 || s >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + s) * 1000 + frac.parse::<u64>().ok()?)
}

/// `HH:MM:SS<sep>mmm` with millisecond rounding.
pub fn format_timestamp(seconds: f64, sep: char) -> String {
    let ms = s_to_ms(seconds);
    let (h, rem) = (ms / 3_600_000, ms % 3_600_000);
    let (m, rem) = (rem / 60_000, rem % 60_000);
    let (s, ms) = (rem / 1000, rem % 1000);
    format!("{h:02}:{m:02}:{s:02}{sep}{ms:03}")
}

/// Joins cue lines and collapses whitespace runs to single spaces.
fn normalize_text<'a>(lines: impl IntoIterator<Item = &'a str>) -> String {
    lines
        .into_iter()
        .flat_map(str::split_whitespace)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `start --> end [settings]`.
fn parse_timing(
    line: &str,
    line_no: usize,
    separators: &[char],
) -> Result<(u64, u64), CorpusError> {
    let (start, rest) = line
        .split_once("-->")
        .ok_or_else(|| CorpusError::MalformedCue {
            line: line_no,
            reason: "expected timing line".into(),
        })?;
    let start = start.trim();
    let end = rest.split_whitespace().next().unwrap_or("");
    let bad = |v: &str| CorpusError::MalformedTimestamp {
        line: line_no,
        value: v.to_string(),
    };
    let start_ms = parse_timestamp(start, separators).ok_or_else(|| bad(start))?;
    let end_ms = parse_timestamp(end, separators).ok_or_else(|| bad(end))?;
    if start_ms >= end_ms {
        return Err(CorpusError::MalformedCue {
            line: line_no,
            reason: format!("start {start} is not before end {end}"),
        });
    }
    Ok((start_ms, end_ms))
}

/// Splits into blank-line-separated blocks of `(line number, text)`.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else {
            current.push((i + 1, line));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn cue(start_ms: u64, end_ms: u64, text: String) -> TranscriptSegment {
    TranscriptSegment {
        index: 0,
        start_s: ms_to_s(start_ms),
        end_s: ms_to_s(end_ms),
        text,
    }
}

fn parse_srt(text: &str) -> Result<Vec<TranscriptSegment>, CorpusError> {
    let mut cues = Vec::new();
    for block in blocks(text) {
        let timing = block
            .iter()
            .position(|(_, l)| l.contains("-->"))
            .ok_or_else(|| CorpusError::MalformedCue {
                line: block[0].0,
                reason: "cue has no timing line".into(),
            })?;
        if timing > 1 {
            return Err(CorpusError::MalformedCue {
                line: block[0].0,
                reason: "unexpected text before timing line".into(),
            });
        }
        let (line_no, line) = block[timing];
        let (start, end) = parse_timing(line, line_no, &[',', '.'])?;
        let body = normalize_text(block[timing + 1..].iter().map(|(_, l)| *l));
        if !body.is_empty() {
            cues.push(cue(start, end, body));
        }
    }
    Ok(cues)
}

fn vtt_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^>\n]*>").expect("valid regex"))
}

fn vtt_unescape(text: &str) -> String {
    vtt_tag_re()
        .replace_all(text, "")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&nbsp;", " ")
        .replace("&lrm;", "")
        .replace("&rlm;", "")
        .replace("&amp;", "&")
}

fn vtt_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn parse_vtt(text: &str) -> Result<Vec<TranscriptSegment>, CorpusError> {
    let first = text.lines().next().unwrap_or("");
    let first = first.strip_suffix('\r').unwrap_or(first);
    let valid_header =
        first == "WEBVTT" || first.starts_with("WEBVTT ") || first.starts_with("WEBVTT\t");
    if !valid_header {
        return Err(CorpusError::MissingHeader);
    }
    let mut cues = Vec::new();
    for (n, block) in blocks(text).into_iter().enumerate() {
        if n == 0 {
            // header block, possibly with metadata lines
            continue;
        }
        let head = block[0].1.trim_start();
        if head.starts_with("NOTE") || head.starts_with("STYLE") || head.starts_with("REGION") {
            continue;
        }
        let timing = match block.iter().position(|(_, l)| l.contains("-->")) {
            Some(i) if i <= 1 => i,
            Some(_) | None => {
                return Err(CorpusError::MalformedCue {
                    line: block[0].0,
                    reason: "cue has no timing line".into(),
                })
            }
        };
        let (line_no, line) = block[timing];
        let (start, end) = parse_timing(line, line_no, &['.'])?;
        let body = vtt_unescape(&normalize_text(block[timing + 1..].iter().map(|(_, l)| *l)));
        let body = normalize_text([body.as_str()]);
        if !body.is_empty() {
            cues.push(cue(start, end, body));
        }
    }
    Ok(cues)
}

#[derive(Deserialize)]
struct YtEntry {
    text: String,
    start: f64,
    duration: f64,
}

fn parse_yt_json(text: &str) -> Result<Vec<TranscriptSegment>, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CorpusError::InvalidYtJson(e.to_string()))?;
    let serde_json::Value::Array(items) = value else {
        return Err(CorpusError::InvalidYtJson(
            "top-level value is not an array".into(),
        ));
    };
    let mut cues = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let entry: YtEntry = serde_json::from_value(item)
            .map_err(|e| CorpusError::InvalidYtJson(format!("entry {i}: {e}")))?;
        if !(entry.start.is_finite() && entry.duration.is_finite()) || entry.start < 0.0 {
            return Err(CorpusError::InvalidYtJson(format!(
                "entry {i}: bad start/duration"
            )));
        }
        let start = s_to_ms(entry.start);
        let end = s_to_ms(entry.start + entry.duration);
        if start >= end {
            return Err(CorpusError::MalformedCue {
                line: i + 1,
                reason: "non-positive duration".into(),
            });
        }
        let body = normalize_text(entry.text.lines());
        if !body.is_empty() {
            cues.push(cue(start, end, body));
        }
    }
    Ok(cues)
}

/// Canonical SRT: sequential numbering, `HH:MM:SS,mmm`, single-line text.
pub fn to_srt(segments: &[TranscriptSegment]) -> String {
    let mut out = String::new();
    for (i, s) in segments.iter().enumerate() {
        out.push_str(&format!(
            "{}\n{} --> {}\n{}\n\n",
            i + 1,
            format_timestamp(s.start_s, ','),
            format_timestamp(s.end_s, ','),
            s.text
        ));
    }
    out
}

/// Canonical WebVTT with escaped cue text.
pub fn to_vtt(segments: &[TranscriptSegment]) -> String {
    let mut out = String::from("WEBVTT\n\n");
    for s in segments {
        out.push_str(&format!(
            "{} --> {}\n{}\n\n",
            format_timestamp(s.start_s, '.'),
            format_timestamp(s.end_s, '.'),
            vtt_escape(&s.text)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(index: usize, a: f64, b: f64, t: &str) -> TranscriptSegment {
        TranscriptSegment {
            index,
            start_s: a,
            end_s: b,
            text: t.into(),
        }
    }

    #[test]
    fn srt_single_cue() {
        let got = parse_transcript(
            b"1\n00:00:01,000 --> 00:00:03,500\nhello world\n",
            TranscriptFormat::Srt,
        )
        .unwrap();
        assert_eq!(got, vec![seg(1, 1.0, 3.5, "hello world")]);
    }

    #[test]
    fn empty_input_any_format() {
        for f in [
            TranscriptFormat::Srt,
            TranscriptFormat::Vtt,
            TranscriptFormat::YtJson,
        ] {
            assert!(parse_transcript(b"", f).unwrap().is_empty());
        }
    }

    #[test]
    fn yt_json_end_is_start_plus_duration() {
        let got = parse_transcript(
            br#"[{"text":"rinse","start":1.0,"duration":2.5}]"#,
            TranscriptFormat::YtJson,
        )
        .unwrap();
        assert_eq!(got, vec![seg(1, 1.0, 3.5, "rinse")]);
    }

    #[test]
    fn yt_json_non_array() {
        let err = parse_transcript(br#"{"text":"x"}"#, TranscriptFormat::YtJson).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidYtJson(_)));
    }

    #[test]
    fn srt_reversed_times_is_malformed() {
        let err = parse_transcript(
            b"1\n00:00:05,000 --> 00:00:04,000\nx\n",
            TranscriptFormat::Srt,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MalformedCue { line: 2, .. }));
    }

    #[test]
    fn srt_bad_timestamp_reports_line() {
        let err = parse_transcript(
            b"1\n00:00:01,000 --> 00:00:03,500\na\n\n2\n00:0x:04,000 --> 00:00:05,000\nb\n",
            TranscriptFormat::Srt,
        )
        .unwrap_err();
        assert!(
            matches!(err, CorpusError::MalformedTimestamp { line: 6, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn vtt_requires_header() {
        let err =
            parse_transcript(b"00:01.000 --> 00:02.000\nhi\n", TranscriptFormat::Vtt).unwrap_err();
        assert!(matches!(err, CorpusError::MissingHeader));
    }

    #[test]
    fn vtt_with_ids_notes_settings_and_tags() {
        let raw = "\u{feff}WEBVTT - demo\r\nKind: captions\r\n\r\nNOTE a comment\r\nspanning lines\r\n\r\nintro\r\n00:01.000 --> 00:02.500 align:start position:10%\r\n<v Nurse>Press <b>firmly</b> &amp; hold\r\n\r\n01:00:00.000 --> 01:00:01.000\r\nlate\r\n";
        let got = parse_transcript(raw.as_bytes(), TranscriptFormat::Vtt).unwrap();
        assert_eq!(
            got,
            vec![
                seg(1, 1.0, 2.5, "Press firmly & hold"),
                seg(2, 3600.0, 3601.0, "late")
            ]
        );
    }

    #[test]
    fn overlapping_out_of_order_cues_are_sorted_stably() {
        let raw = "1\n00:00:05,000 --> 00:00:07,000\nc\n\n2\n00:00:01,000 --> 00:00:06,000\na\n\n3\n00:00:01,000 --> 00:00:02,000\nb\n";
        let got = parse_transcript(raw.as_bytes(), TranscriptFormat::Srt).unwrap();
        let texts: Vec<_> = got.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b", "c"]);
        assert_eq!(
            got.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn multiline_cue_text_joined() {
        let got = parse_transcript(
            b"1\n00:00:00,000 --> 00:00:01,000\n first line\nsecond  \n",
            TranscriptFormat::Srt,
        )
        .unwrap();
        assert_eq!(got[0].text, "first line second");
    }

    #[test]
    fn invalid_utf8() {
        assert!(matches!(
            parse_transcript(&[0xff, 0xfe, 0x00], TranscriptFormat::Srt),
            Err(CorpusError::InvalidUtf8)
        ));
    }

    #[test]
    fn timestamp_forms() {
        assert_eq!(parse_timestamp("01:02.345", &['.']), Some(62_345));
        assert_eq!(parse_timestamp("100:00:00.000", &['.']), Some(360_000_000));
        assert_eq!(parse_timestamp("00:60:00.000", &['.']), None);
        assert_eq!(parse_timestamp("00:00:01,5", &[',']), None);
        assert_eq!(format_timestamp(3725.5, ','), "01:02:05,500");
    }

    fn arb_segments() -> impl Strategy<Value = Vec<TranscriptSegment>> {
        prop::collection::vec(
            (
                0u64..5_000_000,
                1u64..100_000,
                "[A-Za-z0-9&<>',.!? ]{0,20}[A-Za-z]",
            ),
            0..15,
        )
        .prop_map(|raw| {
            let mut segs: Vec<_> = raw
                .into_iter()
                .map(|(start, len, text)| {
                    seg(
                        0,
                        ms_to_s(start),
                        ms_to_s(start + len),
                        &normalize_text([text.as_str()]),
                    )
                })
                .collect();
            segs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            for (i, s) in segs.iter_mut().enumerate() {
                s.index = i + 1;
            }
            segs
        })
    }

    proptest! {
        #[test]
        fn srt_roundtrip(segs in arb_segments()) {
            let again = parse_transcript(to_srt(&segs).as_bytes(), TranscriptFormat::Srt).unwrap();
            prop_assert_eq!(again, segs);
        }

        #[test]
        fn vtt_roundtrip(segs in arb_segments()) {
            let again = parse_transcript(to_vtt(&segs).as_bytes(), TranscriptFormat::Vtt).unwrap();
            prop_assert_eq!(again, segs);
        }
    }
}
