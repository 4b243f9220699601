//! Precomputed per-frame feature matrices.
//!
//! Text layout: a header line `MEDVID-FEAT v1 <k> <d>` followed by `k` lines
//! of `d` whitespace-separated reals. Binary layout: the header line gains a
//! fifth field `f32le` and is followed by `k * d` little-endian f32 values.

use super::RetrievalError;

const MAGIC: &str = "MEDVID-FEAT";
const VERSION: &str = "v1";

/// A `k × d` matrix, one row per sampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FrameFeatures {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, RetrievalError> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(RetrievalError::Features(
                "feature matrix needs at least one non-empty row".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(RetrievalError::Features("ragged feature matrix".into()));
        }
        Ok(Self { dim, rows })
    }

    pub fn frame_count(&self) -> usize {
        self.rows.len()
    }
}

fn bad(msg: impl Into<String>) -> RetrievalError {
    RetrievalError::Features(msg.into())
}

pub fn parse_frame_features(raw: &[u8]) -> Result<FrameFeatures, RetrievalError> {
    let header_end = raw.iter().position(|&b| b == b'\n').unwrap_or(raw.len());
    let header = std::str::from_utf8(&raw[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 4 || fields[0] != MAGIC || fields[1] != VERSION {
        return Err(bad(format!("bad header {header:?}")));
    }
    let k: usize = fields[2].parse().map_err(|_| bad("bad frame count"))?;
    let d: usize = fields[3]
        .parse()
        .map_err(|_| bad("bad feature dimension"))?;
    if d == 0 {
        return Err(bad("feature dimension must be positive"));
    }
    let body = raw.get(header_end + 1..).unwrap_or(&[]);
    let rows = match fields.get(4) {
        None => parse_text_rows(body, k, d)?,
        Some(&"f32le") => parse_binary_rows(body, k, d)?,
        Some(other) => return Err(bad(format!("unknown encoding {other:?}"))),
    };
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value"));
    }
    Ok(FrameFeatures { dim: d, rows })
}

fn parse_text_rows(body: &[u8], k: usize, d: usize) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let text = std::str::from_utf8(body).map_err(|_| bad("body is not UTF-8"))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != k {
        return Err(bad(format!(
            "header declares {k} frames, found {}",
            lines.len()
        )));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let row = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("frame {i}: bad value {v:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != d {
                return Err(bad(format!(
                    "frame {i}: expected {d} values, found {}",
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect()
}

fn parse_binary_rows(body: &[u8], k: usize, d: usize) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let expected = k
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("matrix too large"))?;
    if body.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes of f32 data, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Ok(values.chunks(d).map(<[f64]>::to_vec).collect())
}

/// Text layout with values printed in shortest round-trip form.
pub fn write_frame_features(features: &FrameFeatures) -> String {
    let mut out = format!(
        "{MAGIC} {VERSION} {} {}\n",
        features.rows.len(),
        features.dim
    );
    for row in &features.rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
