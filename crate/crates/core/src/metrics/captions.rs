use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::corpus::{tokenize, GoldStepSet};
use crate::span::{temporal_iou, TimeSpan};
use crate::stepcap::StepCaption;

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CaptionReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub iou_at_03: f64,
    pub iou_at_05: f64,
    pub iou_at_07: f64,
    pub m_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMatch {
    pub pred_idx: usize,
    pub gold_idx: usize,
    pub iou: f64,
}

fn step_iou(a: &StepCaption, b: &StepCaption) -> f64 {
    match (
        TimeSpan::new(a.start_s, a.end_s),
        TimeSpan::new(b.start_s, b.end_s),
    ) {
        (Ok(x), Ok(y)) => temporal_iou(&x, &y),
        _ => 0.0,
    }
}

/// Greedy one-to-one matching by descending IoU, ties by earlier gold
/// start. Zero-IoU pairs never match.
pub fn match_steps(pred: &[StepCaption], gold: &[StepCaption]) -> Vec<StepMatch> {
    let mut pairs: Vec<StepMatch> = Vec::new();
    for (p, ps) in pred.iter().enumerate() {
        for (g, gs) in gold.iter().enumerate() {
            let iou = step_iou(ps, gs);
            if iou > 0.0 {
                pairs.push(StepMatch {
                    pred_idx: p,
                    gold_idx: g,
                    iou,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(
                gold[a.gold_idx]
                    .start_s
                    .total_cmp(&gold[b.gold_idx].start_s),
            )
            .then(a.gold_idx.cmp(&b.gold_idx))
            .then(a.pred_idx.cmp(&b.pred_idx))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut out = Vec::new();
    for m in pairs {
        if !pred_used[m.pred_idx] && !gold_used[m.gold_idx] {
            pred_used[m.pred_idx] = true;
            gold_used[m.gold_idx] = true;
            out.push(m);
        }
    }
    out
}

fn overlap_count(pred: &[String], gold: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    pred.iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset token overlap of lowercase whitespace tokens; empty sides score 0.
pub fn token_f1(pred_text: &str, gold_text: &str) -> (f64, f64, f64) {
    let (pred, gold) = (tokenize(pred_text), tokenize(gold_text));
    let overlap = overlap_count(&pred, &gold) as f64;
    let p = if pred.is_empty() {
        0.0
    } else {
        overlap / pred.len() as f64
    };
    let r = if gold.is_empty() {
        0.0
    } else {
        overlap / gold.len() as f64
    };
    (p, r, harmonic(p, r))
}

/// Text scores are summed over matched pairs and divided by the total
/// predicted (precision) and gold (recall) step counts across all keys.
/// Temporal scores are per gold key, then averaged; prediction keys without
/// gold steps are ignored.
pub fn evaluate_steps(
    pred_sets: &[GoldStepSet],
    gold_sets: &[GoldStepSet],
) -> Result<CaptionReport, MetricsError> {
    let key = |s: &GoldStepSet| (s.query_id.clone(), s.video_id.clone());
    let gold: BTreeMap<_, &GoldStepSet> = gold_sets
        .iter()
        .filter(|s| !s.steps.is_empty())
        .map(|s| (key(s), s))
        .collect();
    let pred: BTreeMap<_, &GoldStepSet> = pred_sets.iter().map(|s| (key(s), s)).collect();
    if !gold.keys().any(|k| pred.contains_key(k)) {
        return Err(MetricsError::DisjointEvaluation);
    }
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    let (mut n_pred, mut n_gold) = (0usize, 0usize);
    let mut at = [0.0; 3];
    let mut m_iou = 0.0;
    for (k, g) in &gold {
        let preds: &[StepCaption] = pred.get(k).map_or(&[], |p| &p.steps);
        let matches = match_steps(preds, &g.steps);
        n_pred += preds.len();
        n_gold += g.steps.len();
        for m in &matches {
            let (p, r, _) = token_f1(&preds[m.pred_idx].text, &g.steps[m.gold_idx].text);
            p_sum += p;
            r_sum += r;
        }
        let denom = g.steps.len() as f64;
        for (slot, t) in at.iter_mut().zip(IOU_THRESHOLDS) {
            *slot += matches.iter().filter(|m| m.iou >= t).count() as f64 / denom;
        }
        m_iou += matches.iter().map(|m| m.iou).sum::<f64>() / denom;
    }
    let keys = gold.len() as f64;
    let precision = if n_pred == 0 {
        0.0
    } else {
        p_sum / n_pred as f64
    };
    let recall = r_sum / n_gold as f64;
    Ok(CaptionReport {
        precision,
        recall,
        f_score: harmonic(precision, recall),
        iou_at_03: at[0] / keys,
        iou_at_05: at[1] / keys,
        iou_at_07: at[2] / keys,
        m_iou: m_iou / keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(a: f64, b: f64, text: &str) -> StepCaption {
        StepCaption {
            start_s: a,
            end_s: b,
            text: text.into(),
        }
    }

    fn set(q: &str, v: &str, steps: Vec<StepCaption>) -> GoldStepSet {
        GoldStepSet {
            query_id: q.into(),
            video_id: v.into(),
            steps,
        }
    }

    fn example() -> (Vec<StepCaption>, Vec<StepCaption>) {
        (
            vec![step(0.0, 10.0, "wash hands"), step(10.0, 20.0, "dry")],
            vec![step(0.0, 9.0, "wash hands"), step(15.0, 20.0, "dry")],
        )
    }

    #[test]
    fn match_example() {
        let (pred, gold) = example();
        let m = match_steps(&pred, &gold);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].pred_idx, m[0].gold_idx), (0, 0));
        assert!((m[0].iou - 0.9).abs() < 1e-12);
        assert_eq!((m[1].pred_idx, m[1].gold_idx), (1, 1));
        assert!((m[1].iou - 0.5).abs() < 1e-12);
        assert!(match_steps(&pred, &[step(30.0, 40.0, "x")]).is_empty());
    }

    #[test]
    fn caption_fixture() {
        let (pred, gold) = example();
        let r = evaluate_steps(&[set("q", "v", pred)], &[set("q", "v", gold)]).unwrap();
        assert_eq!(r.iou_at_05, 1.0);
        assert_eq!(r.iou_at_07, 0.5);
        assert!((r.m_iou - 0.7).abs() < 1e-12);
        assert_eq!((r.precision, r.recall, r.f_score), (1.0, 1.0, 1.0));
    }

    #[test]
    fn token_f1_examples() {
        let (p, r, f) = token_f1("wash your hands", "wash hands thoroughly");
        assert!(
            (p - 2.0 / 3.0).abs() < 1e-12
                && (r - 2.0 / 3.0).abs() < 1e-12
                && (f - 2.0 / 3.0).abs() < 1e-12
        );
        assert_eq!(token_f1("Rinse well", "rinse  WELL"), (1.0, 1.0, 1.0));
        assert_eq!(token_f1("a b", "c d"), (0.0, 0.0, 0.0));
        assert_eq!(token_f1("the the the", "the").0, 1.0 / 3.0);
    }

    #[test]
    fn identity_and_empty_predictions() {
        let gold = vec![
            set("q1", "v1", example().1),
            set("q2", "v2", vec![step(3.0, 8.0, "apply gauze")]),
        ];
        let r = evaluate_steps(&gold, &gold).unwrap();
        assert_eq!(
            r,
            CaptionReport {
                precision: 1.0,
                recall: 1.0,
                f_score: 1.0,
                iou_at_03: 1.0,
                iou_at_05: 1.0,
                iou_at_07: 1.0,
                m_iou: 1.0
            }
        );
        let empty = vec![set("q1", "v1", vec![]), set("q2", "v2", vec![])];
        assert_eq!(
            evaluate_steps(&empty, &gold).unwrap(),
            CaptionReport::default()
        );
        assert_eq!(
            evaluate_steps(&[set("q3", "v", vec![])], &gold),
            Err(MetricsError::DisjointEvaluation)
        );
    }

    fn arb_steps() -> impl Strategy<Value = Vec<StepCaption>> {
        prop::collection::vec((0u8..20, 1u8..8), 0..6).prop_map(|v| {
            v.into_iter()
                .map(|(a, l)| step(a as f64, (a + l) as f64, "s"))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matching_is_one_to_one(pred in arb_steps(), gold in arb_steps()) {
            let m = match_steps(&pred, &gold);
            let mut ps: Vec<_> = m.iter().map(|x| x.pred_idx).collect();
            let mut gs: Vec<_> = m.iter().map(|x| x.gold_idx).collect();
            ps.sort();
            ps.dedup();
            gs.sort();
            gs.dedup();
            prop_assert_eq!(ps.len(), m.len());
            prop_assert_eq!(gs.len(), m.len());
            prop_assert!(m.iter().all(|x| x.iou > 0.0 && x.iou <= 1.0));
        }

        #[test]
        fn report_bounded_and_miou_below_matched_mean(pred in arb_steps(), gold in arb_steps()) {
            prop_assume!(!gold.is_empty());
            let m = match_steps(&pred, &gold);
            let r = evaluate_steps(&[set("q", "v", pred)], &[set("q", "v", gold)]).unwrap();
            for v in [r.precision, r.recall, r.f_score, r.iou_at_03, r.iou_at_05, r.iou_at_07, r.m_iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !m.is_empty() {
                let matched_mean = m.iter().map(|x| x.iou).sum::<f64>() / m.len() as f64;
                prop_assert!(r.m_iou <= matched_mean + 1e-12);
            }
            prop_assert!(r.iou_at_07 <= r.iou_at_05 && r.iou_at_05 <= r.iou_at_03);
        }
    }
}
