//! Detection-vs-ground-truth matching and the precision / recall / F1 /
//! AP / mAP@50 metric suite.
//!
//! Matching is greedy by score: within an image and class, each detection in
//! descending score order claims the unmatched ground truth it overlaps most,
//! provided that IoU reaches the threshold. AP integrates the all-point
//! interpolated precision-recall curve.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{ClassMap, GroundTruthInstance};
use crate::exec::Execution;
use crate::geometry::BoundingBox;

pub const MAP50_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("IoU threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("detections line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One detection as it appears in a detections JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection (input order): index of the claimed ground truth.
    pub detection_matches: Vec<Option<usize>>,
    /// Per ground truth (input order).
    pub truth_matched: Vec<bool>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.detection_matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.detection_matches.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.truth_matched.iter().filter(|m| !**m).count()
    }
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::Threshold(t))
    }
}

/// Detection indices by descending score; input order breaks ties.
fn score_order(dets: &[EvalDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

pub fn match_detections(
    dets: &[EvalDetection],
    truths: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    check_threshold(iou_threshold)?;
    let mut groups: HashMap<(&str, usize), Vec<usize>> = HashMap::new();
    for (i, t) in truths.iter().enumerate() {
        groups.entry((t.image_id.as_str(), t.class_id)).or_default().push(i);
    }
    let mut detection_matches = vec![None; dets.len()];
    let mut truth_matched = vec![false; truths.len()];
    for di in score_order(dets) {
        let d = &dets[di];
        let Some(candidates) = groups.get(&(d.image_id.as_str(), d.class_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &ti in candidates {
            if truth_matched[ti] {
                continue;
            }
            let iou = d.bbox.overlap(&truths[ti].bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        if let Some((ti, iou)) = best {
            if iou >= iou_threshold {
                truth_matched[ti] = true;
                detection_matches[di] = Some(ti);
            }
        }
    }
    Ok(MatchResult {
        detection_matches,
        truth_matched,
        iou_threshold,
    })
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_count);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// All-point AP from TP/FP flags in rank order.
pub fn ap_from_ranked(ranked_tp: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 || ranked_tp.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(ranked_tp.len());
    for (rank, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / n_truth as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope: running max from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(recall, precision) in &points {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// AP for one class. Callers pass only that class's detections and truths.
pub fn average_precision(
    dets: &[EvalDetection],
    truths: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    let m = match_detections(dets, truths, iou_threshold)?;
    let ranked: Vec<bool> = score_order(dets)
        .into_iter()
        .map(|i| m.detection_matches[i].is_some())
        .collect();
    Ok(ap_from_ranked(&ranked, truths.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Detections below this score are left out of TP/FP/FN counts. AP
    /// always uses every detection.
    pub score_threshold: f64,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: MAP50_IOU,
            score_threshold: 0.0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Classes present in the ground truth only.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
}

pub fn evaluate(
    dets: &[EvalDetection],
    truths: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    evaluate_with(
        dets,
        truths,
        &EvalOptions {
            iou_threshold,
            ..EvalOptions::default()
        },
    )
}

pub fn evaluate_with(
    dets: &[EvalDetection],
    truths: &[GroundTruthInstance],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    check_threshold(opts.iou_threshold)?;
    let counted: Vec<EvalDetection> = dets
        .iter()
        .filter(|d| d.score >= opts.score_threshold)
        .cloned()
        .collect();
    let m = match_detections(&counted, truths, opts.iou_threshold)?;
    let (tp, fp, fn_count) = (m.tp(), m.fp(), m.fn_count());
    let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_count);

    let classes: Vec<usize> = truths
        .iter()
        .map(|t| t.class_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let aps = opts.exec.map(&classes, |&c| {
        let d: Vec<EvalDetection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let t: Vec<GroundTruthInstance> = truths.iter().filter(|t| t.class_id == c).cloned().collect();
        average_precision(&d, &t, opts.iou_threshold)
    });
    let mut per_class_ap = BTreeMap::new();
    for (c, ap) in classes.iter().zip(aps) {
        per_class_ap.insert(*c, ap?);
    }
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        tp,
        fp,
        fn_count,
        precision,
        recall,
        f1,
        per_class_ap,
        map50,
    })
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn render_table(&self, names: Option<&ClassMap>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>10}", "class", "AP");
        for (c, ap) in &self.per_class_ap {
            let label = names
                .and_then(|m| m.name(*c))
                .map(|n| format!("{c} {n}"))
                .unwrap_or_else(|| c.to_string());
            let _ = writeln!(s, "{label:<28} {:>9.2}%", ap * 100.0);
        }
        let _ = writeln!(s, "{}", "-".repeat(39));
        let _ = writeln!(s, "{:<28} {:>9.2}%", "mAP@50", self.map50 * 100.0);
        let _ = writeln!(s, "{:<28} {:>10.4}", "precision", self.precision);
        let _ = writeln!(s, "{:<28} {:>10.4}", "recall", self.recall);
        let _ = writeln!(s, "{:<28} {:>10.4}", "F1", self.f1);
        let _ = writeln!(s, "{:<28} {:>10}", "true positives", self.tp);
        let _ = writeln!(s, "{:<28} {:>10}", "false positives", self.fp);
        let _ = writeln!(s, "{:<28} {:>10}", "false negatives", self.fn_count);
        s
    }
}

pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<EvalDetection>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let det: EvalDetection = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_detection_jsonl<W: Write>(mut w: W, det: &EvalDetection) -> io::Result<()> {
    serde_json::to_writer(&mut w, det)?;
    w.write_all(b"\n")
}
