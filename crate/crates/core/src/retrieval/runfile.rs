use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::RetrievalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub video_id: String,
    pub rank: usize,
    pub score: f64,
    pub run_tag: String,
}

/// Ranked retrieval output for a set of queries, in file order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub entries: Vec<RunEntry>,
}

impl RunFile {
    /// Query ids in order of first appearance.
    pub fn queries(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .map(|e| e.query_id.as_str())
            .filter(|q| seen.insert(*q))
            .collect()
    }

    /// Video ids retrieved for each query, ordered by rank.
    pub fn rankings(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<(usize, &str)>> = HashMap::new();
        for e in &self.entries {
            out.entry(e.query_id.as_str())
                .or_default()
                .push((e.rank, e.video_id.as_str()));
        }
        out.into_iter()
            .map(|(q, mut v)| {
                v.sort_by_key(|(rank, _)| *rank);
                (q, v.into_iter().map(|(_, id)| id).collect())
            })
            .collect()
    }

    /// Keeps at most `k` entries per query.
    pub fn truncate(&self, k: usize) -> RunFile {
        RunFile {
            entries: self
                .entries
                .iter()
                .filter(|e| e.rank <= k)
                .cloned()
                .collect(),
        }
    }
}

fn format_score(score: f64) -> String {
    let s = format!("{score:.6}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn check_field(what: &str, value: &str) -> Result<(), RetrievalError> {
    if value.is_empty() || value.chars().any(char::is_whitespace) {
        return Err(RetrievalError::InvalidRun(format!(
            "{what} {value:?} is empty or contains whitespace"
        )));
    }
    Ok(())
}

/// `query_id Q0 video_id rank score run_tag`, score to 6 decimals.
pub fn write_run(run: &RunFile) -> Result<String, RetrievalError> {
    let mut last: HashMap<&str, (usize, f64)> = HashMap::new();
    let mut out = String::new();
    for e in &run.entries {
        check_field("query id", &e.query_id)?;
        check_field("video id", &e.video_id)?;
        check_field("run tag", &e.run_tag)?;
        if !e.score.is_finite() {
            return Err(RetrievalError::InvalidRun(format!(
                "non-finite score for {} {}",
                e.query_id, e.video_id
            )));
        }
        let (prev_rank, prev_score) = last
            .get(e.query_id.as_str())
            .copied()
            .unwrap_or((0, f64::INFINITY));
        if e.rank != prev_rank + 1 {
            return Err(RetrievalError::InvalidRun(format!(
                "query {}: rank {} follows rank {prev_rank}",
                e.query_id, e.rank
            )));
        }
        if e.score > prev_score {
            return Err(RetrievalError::InvalidRun(format!(
                "query {}: scores increase at rank {}",
                e.query_id, e.rank
            )));
        }
        last.insert(&e.query_id, (e.rank, e.score));
        out.push_str(&format!(
            "{} Q0 {} {} {} {}\n",
            e.query_id,
            e.video_id,
            e.rank,
            format_score(e.score),
            e.run_tag
        ));
    }
    Ok(out)
}

pub fn read_run(raw: &str) -> Result<RunFile, RetrievalError> {
    let mut entries = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| RetrievalError::RunLine {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| bad(format!("bad rank {:?}", fields[3])))?;
        if rank == 0 {
            return Err(bad("rank must be positive".into()));
        }
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| bad(format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(bad("score must be finite".into()));
        }
        entries.push(RunEntry {
            query_id: fields[0].to_string(),
            video_id: fields[2].to_string(),
            rank,
            score,
            run_tag: fields[5].to_string(),
        });
    }
    Ok(RunFile { entries })
}
