//! Retrieval and step-captioning evaluation.

mod captions;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QrelEntry;
use crate::retrieval::RunFile;
pub use captions::{evaluate_steps, match_steps, token_f1, CaptionReport, StepMatch};
pub use report::{format_report, EvaluationReport, METRIC_PROFILE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no relevant documents for the query")]
    NoRelevant,
    #[error("cutoff k must be at least 1")]
    InvalidK,
    #[error("predictions and judgments share no keys")]
    DisjointEvaluation,
}

/// Mean over hit positions of precision at that position, divided by the
/// number of relevant documents.
pub fn average_precision(ranked: &[&str], relevant: &HashSet<&str>) -> Result<f64, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, doc) in ranked.iter().enumerate() {
        if relevant.contains(doc) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

fn hits_at(ranked: &[&str], relevant: &HashSet<&str>, k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|d| relevant.contains(*d))
        .count()
}

/// Hits in the top `k` over `k`; missing slots count as misses.
pub fn precision_at_k(
    ranked: &[&str],
    relevant: &HashSet<&str>,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    Ok(hits_at(ranked, relevant, k) as f64 / k as f64)
}

pub fn recall_at_k(
    ranked: &[&str],
    relevant: &HashSet<&str>,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if relevant.is_empty() {
        return Err(MetricsError::NoRelevant);
    }
    Ok(hits_at(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// Binary-gain nDCG over the first `cutoff` ranks (the whole run when
/// `None`).
pub fn ndcg(
    ranked: &[&str],
    relevant: &HashSet<&str>,
    cutoff: Option<usize>,
) -> Result<f64, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::NoRelevant);
    }
    if cutoff == Some(0) {
        return Err(MetricsError::InvalidK);
    }
    let depth = cutoff.unwrap_or(usize::MAX);
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(depth)
        .enumerate()
        .filter(|(_, d)| relevant.contains(*d))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal_hits = relevant.len().min(depth);
    let idcg: f64 = (0..ideal_hits).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
    pub ndcg: f64,
}

/// Per-query scores behind a `RetrievalReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query_id: String,
    pub scores: RetrievalReport,
    pub in_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEvaluation {
    pub report: RetrievalReport,
    pub per_query: Vec<QueryScores>,
    /// Judged queries without any relevant video, left out of the averages.
    pub skipped_no_relevant: Vec<String>,
}

/// Dedupes a query's ranking, keeping each video's best rank.
fn dedup_ranking<'a>(ranking: &[&'a str]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    ranking
        .iter()
        .copied()
        .filter(|v| seen.insert(*v))
        .collect()
}

/// Macro-averages over judged queries with at least one relevant video.
/// Such queries missing from the run score 0.
pub fn evaluate_retrieval(
    run: &RunFile,
    qrels: &[QrelEntry],
    ndcg_cutoff: Option<usize>,
) -> Result<RetrievalEvaluation, MetricsError> {
    let mut judged: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
    for q in qrels {
        let rel = judged.entry(q.query_id.as_str()).or_default();
        if q.relevance > 0 {
            rel.insert(q.video_id.as_str());
        }
    }
    let rankings = run.rankings();
    if !judged.keys().any(|q| rankings.contains_key(q)) {
        return Err(MetricsError::DisjointEvaluation);
    }
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (qid, relevant) in &judged {
        if relevant.is_empty() {
            skipped.push(qid.to_string());
            continue;
        }
        let ranked = rankings
            .get(qid)
            .map(|r| dedup_ranking(r))
            .unwrap_or_default();
        let scores = RetrievalReport {
            map: average_precision(&ranked, relevant)?,
            r_at_5: recall_at_k(&ranked, relevant, 5)?,
            r_at_10: recall_at_k(&ranked, relevant, 10)?,
            p_at_5: precision_at_k(&ranked, relevant, 5)?,
            p_at_10: precision_at_k(&ranked, relevant, 10)?,
            ndcg: ndcg(&ranked, relevant, ndcg_cutoff)?,
        };
        per_query.push(QueryScores {
            query_id: qid.to_string(),
            scores,
            in_run: rankings.contains_key(qid),
        });
    }
    let n = per_query.len().max(1) as f64;
    let mean =
        |f: fn(&RetrievalReport) -> f64| per_query.iter().map(|q| f(&q.scores)).sum::<f64>() / n;
    let report = RetrievalReport {
        map: mean(|r| r.map),
        r_at_5: mean(|r| r.r_at_5),
        r_at_10: mean(|r| r.r_at_10),
        p_at_5: mean(|r| r.p_at_5),
        p_at_10: mean(|r| r.p_at_10),
        ndcg: mean(|r| r.ndcg),
    };
    Ok(RetrievalEvaluation {
        report,
        per_query,
        skipped_no_relevant: skipped,
    })
}

/// Ideal run for the given judgments: relevant videos by descending grade,
/// then id.
pub fn ideal_run(qrels: &[QrelEntry], run_tag: &str) -> RunFile {
    let queries: BTreeSet<&str> = qrels.iter().map(|q| q.query_id.as_str()).collect();
    let mut entries = Vec::new();
    for qid in queries {
        let mut rel: Vec<&QrelEntry> = qrels
            .iter()
            .filter(|q| q.query_id == qid && q.relevance > 0)
            .collect();
        rel.sort_by(|a, b| {
            b.relevance
                .cmp(&a.relevance)
                .then_with(|| a.video_id.cmp(&b.video_id))
        });
        let n = rel.len();
        for (i, q) in rel.into_iter().enumerate() {
            entries.push(crate::retrieval::RunEntry {
                query_id: qid.to_string(),
                video_id: q.video_id.clone(),
                rank: i + 1,
                score: (n - i) as f64,
                run_tag: run_tag.to_string(),
            });
        }
    }
    RunFile { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RunEntry;
    use proptest::prelude::*;

    fn set<'a>(v: &[&'a str]) -> HashSet<&'a str> {
        v.iter().copied().collect()
    }

    fn qrel(q: &str, v: &str, rel: u32) -> QrelEntry {
        QrelEntry {
            query_id: q.into(),
            video_id: v.into(),
            relevance: rel,
            gold_span: None,
        }
    }

    fn run(rows: &[(&str, &[&str])]) -> RunFile {
        let mut entries = Vec::new();
        for (q, vids) in rows {
            for (i, v) in vids.iter().enumerate() {
                entries.push(RunEntry {
                    query_id: q.to_string(),
                    video_id: v.to_string(),
                    rank: i + 1,
                    score: -(i as f64),
                    run_tag: "t".into(),
                });
            }
        }
        RunFile { entries }
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&["d1", "d2", "d3", "d4"], &set(&["d1", "d3"])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(
            average_precision(&["a", "b", "c"], &set(&["a", "b"])).unwrap(),
            1.0
        );
        assert_eq!(average_precision(&["c"], &set(&["a"])).unwrap(), 0.0);
        assert_eq!(
            average_precision(&["c"], &set(&[])),
            Err(MetricsError::NoRelevant)
        );
    }

    #[test]
    fn precision_recall_examples() {
        let ranked = ["a", "x", "b", "y", "z", "c"];
        assert_eq!(
            precision_at_k(&ranked, &set(&["a", "b", "c"]), 5).unwrap(),
            0.4
        );
        assert_eq!(recall_at_k(&ranked, &set(&["a", "b"]), 5).unwrap(), 1.0);
        assert_eq!(precision_at_k(&["a", "x"], &set(&["a"]), 5).unwrap(), 0.2);
        assert_eq!(
            recall_at_k(&["a"], &set(&[]), 5),
            Err(MetricsError::NoRelevant)
        );
        assert_eq!(
            precision_at_k(&["a"], &set(&["a"]), 0),
            Err(MetricsError::InvalidK)
        );
    }

    #[test]
    fn ndcg_examples() {
        let rel = set(&["d2", "d3"]);
        let dcg = 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((ndcg(&["d1", "d2", "d3"], &rel, None).unwrap() - dcg / idcg).abs() < 1e-12);
        assert_eq!(ndcg(&["d2", "d3", "d1"], &rel, None).unwrap(), 1.0);
        assert_eq!(ndcg(&["d1", "d4"], &rel, None).unwrap(), 0.0);
        // cutoff 1 keeps only the first rank on both sides
        assert_eq!(ndcg(&["d1", "d2"], &rel, Some(1)).unwrap(), 0.0);
        assert_eq!(ndcg(&["d2", "d1"], &rel, Some(1)).unwrap(), 1.0);
    }

    #[test]
    fn map_fixture() {
        let r = run(&[("q1", &["v1", "v2"]), ("q2", &["v3", "v4"])]);
        let qrels = vec![
            qrel("q1", "v1", 1),
            qrel("q2", "v4", 1),
            qrel("q2", "v3", 0),
        ];
        let e = evaluate_retrieval(&r, &qrels, None).unwrap();
        assert!((e.report.map - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_and_unjudged_queries() {
        let r = run(&[("q1", &["v1"]), ("q9", &["v1"])]);
        let qrels = vec![
            qrel("q1", "v1", 2),
            qrel("q2", "v2", 1),
            qrel("q3", "v3", 0),
        ];
        let e = evaluate_retrieval(&r, &qrels, None).unwrap();
        assert_eq!(e.skipped_no_relevant, vec!["q3"]);
        assert_eq!(e.per_query.len(), 2);
        assert!(!e.per_query[1].in_run);
        assert_eq!(e.report.map, 0.5);
        assert_eq!(
            evaluate_retrieval(&run(&[("q9", &["v1"])]), &qrels, None).unwrap_err(),
            MetricsError::DisjointEvaluation
        );
    }

    #[test]
    fn ideal_run_scores_one() {
        let qrels = vec![
            qrel("q1", "v2", 1),
            qrel("q1", "v1", 2),
            qrel("q2", "v3", 1),
            qrel("q2", "v4", 0),
        ];
        let e = evaluate_retrieval(&ideal_run(&qrels, "ideal"), &qrels, None).unwrap();
        assert_eq!(e.report.map, 1.0);
        assert_eq!(e.report.ndcg, 1.0);
        assert_eq!(e.report.r_at_5, 1.0);
        assert_eq!(e.report.p_at_5, (2.0 / 5.0 + 1.0 / 5.0) / 2.0);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_label_invariant(
            ranked_ids in prop::collection::vec(0u8..12, 0..10),
            rel_ids in prop::collection::btree_set(0u8..12, 1..6),
            k in 1usize..12,
        ) {
            let ranked_owned: Vec<String> = dedup_ranking(
                &ranked_ids.iter().map(|i| format!("d{i}")).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>()
            ).into_iter().map(str::to_string).collect();
            let ranked: Vec<&str> = ranked_owned.iter().map(String::as_str).collect();
            let rel_owned: Vec<String> = rel_ids.iter().map(|i| format!("d{i}")).collect();
            let rel: HashSet<&str> = rel_owned.iter().map(String::as_str).collect();
            let relabel = |s: &str| format!("x{}", &s[1..]);
            let ranked2_owned: Vec<String> = ranked.iter().map(|s| relabel(s)).collect();
            let ranked2: Vec<&str> = ranked2_owned.iter().map(String::as_str).collect();
            let rel2_owned: Vec<String> = rel_owned.iter().map(|s| relabel(s)).collect();
            let rel2: HashSet<&str> = rel2_owned.iter().map(String::as_str).collect();
            let all = |r: &[&str], s: &HashSet<&str>| [
                average_precision(r, s).unwrap(),
                precision_at_k(r, s, k).unwrap(),
                recall_at_k(r, s, k).unwrap(),
                ndcg(r, s, None).unwrap(),
            ];
            let a = all(&ranked, &rel);
            prop_assert!(a.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
            prop_assert_eq!(a, all(&ranked2, &rel2));
            // swapping two non-relevant documents changes nothing
            let non_rel: Vec<usize> = (0..ranked.len()).filter(|i| !rel.contains(ranked[*i])).collect();
            if non_rel.len() >= 2 {
                let mut swapped = ranked.clone();
                swapped.swap(non_rel[0], non_rel[non_rel.len() - 1]);
                prop_assert_eq!(a, all(&swapped, &rel));
            }
        }
    }
}
