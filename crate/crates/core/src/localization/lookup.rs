use super::LocalizationError;
use crate::corpus::{transcript_text, VideoRecord};
use crate::span::{TimeSpan, TokenSpan};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookupRow {
    pub segment_index: usize,
    pub tokens: TokenSpan,
    pub time: TimeSpan,
}

/// Aligns token positions with timeline intervals. Token ranges partition
/// `0..token_count()` in row order.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    rows: Vec<LookupRow>,
}

impl LookupTable {
    pub fn new(rows: Vec<LookupRow>) -> Result<Self, LocalizationError> {
        if rows.is_empty() {
            return Err(LocalizationError::EmptyTranscript);
        }
        let mut next = 0;
        for r in &rows {
            if r.tokens.start_tok != next || r.tokens.end_tok < r.tokens.start_tok {
                return Err(LocalizationError::InvalidTable(format!(
                    "row {} starts at token {} but {next} was expected",
                    r.segment_index, r.tokens.start_tok
                )));
            }
            TimeSpan::new(r.time.start_s, r.time.end_s)?;
            next = r.tokens.end_tok + 1;
        }
        Ok(Self { rows })
    }

    /// One row per frame, frames spread uniformly over `[0, duration_s]`.
    pub fn uniform_frames(frame_count: usize, duration_s: f64) -> Result<Self, LocalizationError> {
        if frame_count == 0 {
            return Err(LocalizationError::EmptySequence);
        }
        TimeSpan::new(0.0, duration_s)?;
        let step = duration_s / frame_count as f64;
        let rows = (0..frame_count)
            .map(|f| {
                let end = if f + 1 == frame_count {
                    duration_s
                } else {
                    (f + 1) as f64 * step
                };
                LookupRow {
                    segment_index: f,
                    tokens: TokenSpan {
                        start_tok: f,
                        end_tok: f,
                    },
                    time: TimeSpan {
                        start_s: f as f64 * step,
                        end_s: end,
                    },
                }
            })
            .collect();
        Self::new(rows)
    }

    pub fn rows(&self) -> &[LookupRow] {
        &self.rows
    }

    pub fn token_count(&self) -> usize {
        self.rows.last().map_or(0, |r| r.tokens.end_tok + 1)
    }

    /// Smallest span covering every row's time range.
    pub fn time_extent(&self) -> TimeSpan {
        let start = self
            .rows
            .iter()
            .map(|r| r.time.start_s)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .rows
            .iter()
            .map(|r| r.time.end_s)
            .fold(f64::NEG_INFINITY, f64::max);
        TimeSpan {
            start_s: start,
            end_s: end,
        }
    }
}

/// Each token takes its own segment's time range, so overlapping cues never
/// share tokens.
pub fn build_lookup(video: &VideoRecord) -> Result<LookupTable, LocalizationError> {
    let text = transcript_text(video)?;
    let rows = text
        .token_offsets
        .iter()
        .map(|(i, tokens)| LookupRow {
            segment_index: *i,
            tokens: *tokens,
            time: video.segments[*i].span(),
        })
        .collect();
    LookupTable::new(rows)
}

pub fn token_span_to_time(
    table: &LookupTable,
    s: &TokenSpan,
) -> Result<TimeSpan, LocalizationError> {
    let n = table.token_count();
    if s.end_tok >= n || s.start_tok > s.end_tok {
        return Err(LocalizationError::TokenOutOfRange {
            index: s.end_tok.max(s.start_tok),
            token_count: n,
        });
    }
    let covering = table.rows.iter().filter(|r| r.tokens.intersects(s));
    let (start, end) = covering.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.time.start_s), b.max(r.time.end_s))
    });
    Ok(TimeSpan {
        start_s: start,
        end_s: end,
    })
}

/// Tokens of every row whose time range overlaps `s` with positive length.
pub fn time_span_to_tokens(
    table: &LookupTable,
    s: &TimeSpan,
) -> Result<TokenSpan, LocalizationError> {
    let mut hit = table
        .rows
        .iter()
        .filter(|r| r.time.intersects(s))
        .peekable();
    if hit.peek().is_none() {
        return Err(LocalizationError::NoCoverage {
            start_s: s.start_s,
            end_s: s.end_s,
        });
    }
    let (first, last) = hit.fold((usize::MAX, 0), |(a, b), r| {
        (a.min(r.tokens.start_tok), b.max(r.tokens.end_tok))
    });
    Ok(TokenSpan {
        start_tok: first,
        end_tok: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_video;
    use proptest::prelude::*;

    fn table() -> LookupTable {
        build_lookup(&test_video(
            "v",
            &[(0.0, 2.0, "wash hands"), (2.0, 5.0, "use soap")],
        ))
        .unwrap()
    }

    #[test]
    fn two_segment_table() {
        let t = table();
        let rows: Vec<_> = t
            .rows()
            .iter()
            .map(|r| {
                (
                    r.segment_index,
                    r.tokens.start_tok,
                    r.tokens.end_tok,
                    r.time.start_s,
                    r.time.end_s,
                )
            })
            .collect();
        assert_eq!(rows, vec![(0, 0, 1, 0.0, 2.0), (1, 2, 3, 2.0, 5.0)]);
    }

    #[test]
    fn single_segment_single_row() {
        let t = build_lookup(&test_video("v", &[(1.0, 4.0, "one two three")])).unwrap();
        assert_eq!(t.rows().len(), 1);
        assert_eq!(
            t.rows()[0].tokens,
            TokenSpan {
                start_tok: 0,
                end_tok: 2
            }
        );
    }

    #[test]
    fn empty_video_rejected() {
        assert!(matches!(
            build_lookup(&test_video("v", &[])),
            Err(LocalizationError::EmptyTranscript)
        ));
    }

    #[test]
    fn mapping_examples() {
        let t = table();
        let time = token_span_to_time(
            &t,
            &TokenSpan {
                start_tok: 1,
                end_tok: 2,
            },
        )
        .unwrap();
        assert_eq!((time.start_s, time.end_s), (0.0, 5.0));
        let toks = time_span_to_tokens(&t, &TimeSpan::new(2.5, 4.0).unwrap()).unwrap();
        assert_eq!(
            toks,
            TokenSpan {
                start_tok: 2,
                end_tok: 3
            }
        );
    }

    #[test]
    fn mapping_errors() {
        let t = table();
        assert!(matches!(
            token_span_to_time(
                &t,
                &TokenSpan {
                    start_tok: 2,
                    end_tok: 4
                }
            ),
            Err(LocalizationError::TokenOutOfRange {
                index: 4,
                token_count: 4
            })
        ));
        assert!(matches!(
            time_span_to_tokens(&t, &TimeSpan::new(5.0, 9.0).unwrap()),
            Err(LocalizationError::NoCoverage { .. })
        ));
    }

    #[test]
    fn overlapping_cues_keep_own_times() {
        let t = build_lookup(&test_video("v", &[(0.0, 3.0, "a b"), (2.0, 4.0, "c")])).unwrap();
        assert_eq!(
            t.rows()[1].time,
            TimeSpan {
                start_s: 2.0,
                end_s: 4.0
            }
        );
        assert_eq!(
            t.rows()[1].tokens,
            TokenSpan {
                start_tok: 2,
                end_tok: 2
            }
        );
    }

    #[test]
    fn uniform_frame_table() {
        let t = LookupTable::uniform_frames(4, 10.0).unwrap();
        assert_eq!(t.token_count(), 4);
        assert_eq!(
            t.rows()[1].time,
            TimeSpan {
                start_s: 2.5,
                end_s: 5.0
            }
        );
        assert_eq!(t.rows()[3].time.end_s, 10.0);
    }

    fn arb_video() -> impl Strategy<Value = VideoRecord> {
        prop::collection::vec((0.0f64..5.0, 0.1f64..5.0, 1usize..4), 1..10).prop_map(|cues| {
            let mut t = 0.0;
            let mut owned = Vec::new();
            for (gap, len, words) in cues {
                let start = t + gap;
                owned.push((start, start + len, vec!["w"; words].join(" ")));
                t = start + len * 0.5;
            }
            let refs: Vec<(f64, f64, &str)> =
                owned.iter().map(|(s, e, x)| (*s, *e, x.as_str())).collect();
            test_video("v", &refs)
        })
    }

    proptest! {
        #[test]
        fn token_ranges_partition(video in arb_video()) {
            let t = build_lookup(&video).unwrap();
            let mut next = 0;
            for r in t.rows() {
                prop_assert_eq!(r.tokens.start_tok, next);
                prop_assert!(r.time.start_s < r.time.end_s);
                next = r.tokens.end_tok + 1;
            }
            prop_assert_eq!(next, t.token_count());
        }

        #[test]
        fn token_time_token_contains_original(video in arb_video(), a in 0usize..40, b in 0usize..40) {
            let t = build_lookup(&video).unwrap();
            let n = t.token_count();
            let (i, j) = ((a % n).min(b % n), (a % n).max(b % n));
            let s = TokenSpan { start_tok: i, end_tok: j };
            let time = token_span_to_time(&t, &s).unwrap();
            let back = time_span_to_tokens(&t, &time).unwrap();
            prop_assert!(back.contains(&s));
        }
    }
}
