use serde::{Deserialize, Serialize};

use super::{CaptionReport, RetrievalReport};

/// Names the metric definitions in force, carried by every report.
pub const METRIC_PROFILE: &str = "medvidqa-kit-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metric_profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionReport>,
    /// `None` means the whole run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_cutoff: Option<usize>,
}

impl EvaluationReport {
    pub fn new(
        retrieval: Option<RetrievalReport>,
        captions: Option<CaptionReport>,
        ndcg_cutoff: Option<usize>,
    ) -> Self {
        Self {
            metric_profile: METRIC_PROFILE.to_string(),
            retrieval,
            captions,
            ndcg_cutoff,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Plain-text table: one row per metric with the raw value and the value
/// scaled by 100, both to 4 decimals.
pub fn format_report(report: &EvaluationReport) -> String {
    let mut rows: Vec<(&str, f64)> = Vec::new();
    if let Some(r) = &report.retrieval {
        rows.extend([
            ("map", r.map),
            ("r_at_5", r.r_at_5),
            ("r_at_10", r.r_at_10),
            ("p_at_5", r.p_at_5),
            ("p_at_10", r.p_at_10),
            ("ndcg", r.ndcg),
        ]);
    }
    if let Some(c) = &report.captions {
        rows.extend([
            ("precision", c.precision),
            ("recall", c.recall),
            ("f_score", c.f_score),
            ("iou_at_03", c.iou_at_03),
            ("iou_at_05", c.iou_at_05),
            ("iou_at_07", c.iou_at_07),
            ("m_iou", c.m_iou),
        ]);
    }
    let mut out = format!("metric-profile: {}\n", report.metric_profile);
    if report.retrieval.is_some() {
        let cutoff = report
            .ndcg_cutoff
            .map_or("full run".to_string(), |k| k.to_string());
        out.push_str(&format!("ndcg-cutoff: {cutoff}\n"));
    }
    out.push_str(&format!("{:<12}{:>10}{:>12}\n", "metric", "value", "x100"));
    for (name, v) in rows {
        out.push_str(&format!("{name:<12}{v:>10.4}{:>12.4}\n", v * 100.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let r = EvaluationReport::new(
            Some(RetrievalReport {
                map: 0.75,
                r_at_5: 1.0,
                r_at_10: 1.0,
                p_at_5: 0.2,
                p_at_10: 0.1,
                ndcg: 0.8,
            }),
            None,
            None,
        );
        let t = format_report(&r);
        assert!(t.starts_with("metric-profile: medvidqa-kit-v1\nndcg-cutoff: full run\n"));
        assert!(t.contains("map             0.7500     75.0000\n"));
        let back: EvaluationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains("\"r_at_10\""));
    }
}
