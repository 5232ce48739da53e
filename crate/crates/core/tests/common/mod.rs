//! Reference implementations and generators shared by the integration
//! tests. Nothing here calls into the library code it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use signvox::decode::{Detection, GridCell, GridDecodeConfig, RawLayerOutput};
use signvox::eval::EvalDetection;
use signvox::{BoundingBox, GroundTruthInstance};

/// IoU from corner coordinates, written independently of `geometry`.
pub fn ref_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (al, ar, at, ab) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bl, br, bt, bb) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let w = (ar.min(br) - al.max(bl)).max(0.0);
    let h = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = w * h;
    let union = (ar - al) * (ab - at) + (br - bl) * (bb - bt) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, max_side: f64) -> BoundingBox {
    BoundingBox {
        cx: rng.gen_range(0.0..1.0),
        cy: rng.gen_range(0.0..1.0),
        w: rng.gen_range(0.01..max_side),
        h: rng.gen_range(0.01..max_side),
    }
}

/// Boxes clustered in a small region so that overlaps are common.
pub fn clustered_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox {
        cx: rng.gen_range(0.4..0.6),
        cy: rng.gen_range(0.4..0.6),
        w: rng.gen_range(0.05..0.3),
        h: rng.gen_range(0.05..0.3),
    }
}

/// Sort once, then walk the list marking every later same-class box whose
/// IoU with a surviving box exceeds the threshold (or equals 1).
pub fn reference_nms(dets: &[Detection], iou_threshold: f64, class_agnostic: bool) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i].clone());
        for &j in &order[pos + 1..] {
            if class_agnostic || dets[i].class_id == dets[j].class_id {
                let o = ref_iou(&dets[i].bbox, &dets[j].bbox);
                if o > iou_threshold || o >= 1.0 {
                    suppressed[j] = true;
                }
            }
        }
    }
    out
}

/// A valid encoder input: random occupied cells, each with one class and
/// up to `b` boxes whose centers lie inside the cell. Returned with the
/// provenance decoding must report, in rank order.
pub fn random_grid_detections(rng: &mut ChaCha8Rng, cfg: &GridDecodeConfig) -> Vec<Detection> {
    let s = cfg.s;
    let mut dets = Vec::new();
    for row in 0..s {
        for col in 0..s {
            if !rng.gen_bool(0.3) {
                continue;
            }
            let class_id = rng.gen_range(0..cfg.c);
            for slot in 0..rng.gen_range(1..=cfg.b) {
                dets.push(Detection {
                    bbox: BoundingBox {
                        cx: (col as f64 + rng.gen_range(0.01..0.99)) / s as f64,
                        cy: (row as f64 + rng.gen_range(0.01..0.99)) / s as f64,
                        w: rng.gen_range(0.001..1.0),
                        h: rng.gen_range(0.001..1.0),
                    },
                    class_id,
                    score: rng.gen_range(0.05..1.0),
                    cell: Some(GridCell { row, col, slot }),
                });
            }
        }
    }
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.cell.cmp(&b.cell)));
    dets
}

pub fn min_score(dets: &[Detection]) -> f64 {
    dets.iter().map(|d| d.score).fold(1.0, f64::min)
}

pub fn same_detections(got: &[Detection], want: &[Detection], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} detections, expected {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(want) {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        if g.class_id != w.class_id || g.cell != w.cell {
            return Err(format!("class/cell mismatch: {g:?} vs {w:?}"));
        }
        if !(close(g.bbox.cx, w.bbox.cx)
            && close(g.bbox.cy, w.bbox.cy)
            && close(g.bbox.w, w.bbox.w)
            && close(g.bbox.h, w.bbox.h))
        {
            return Err(format!("box mismatch: {g:?} vs {w:?}"));
        }
        if !close(g.score, w.score) {
            return Err(format!("score mismatch: {g:?} vs {w:?}"));
        }
    }
    Ok(())
}

pub fn zero_layer(cfg: GridDecodeConfig) -> RawLayerOutput {
    RawLayerOutput::new(cfg, vec![0.0; cfg.tensor_len()]).unwrap()
}

pub fn eval_det(image: &str, class_id: usize, score: f64, bbox: BoundingBox) -> EvalDetection {
    EvalDetection {
        image_id: image.to_string(),
        class_id,
        score,
        bbox,
    }
}

pub fn truth(image: &str, class_id: usize, bbox: BoundingBox) -> GroundTruthInstance {
    GroundTruthInstance {
        image_id: image.to_string(),
        bbox,
        class_id,
        source_label: String::new(),
    }
}

/// Quadratic greedy matcher: detections by descending score (stable), each
/// scanning every truth for the best unclaimed same-image same-class one.
/// Returns TP flags in rank order plus the number of unmatched truths.
pub fn reference_match(dets: &[EvalDetection], truths: &[GroundTruthInstance], thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; truths.len()];
    let mut flags = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let mut best = -1.0;
        let mut best_j = None;
        for (j, t) in truths.iter().enumerate() {
            if claimed[j] || t.image_id != d.image_id || t.class_id != d.class_id {
                continue;
            }
            let o = ref_iou(&d.bbox, &t.bbox);
            if o > best {
                best = o;
                best_j = Some(j);
            }
        }
        match best_j {
            Some(j) if best >= thr => {
                claimed[j] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    let unmatched = claimed.iter().filter(|c| !**c).count();
    (flags, unmatched)
}

/// Step-sum AP: every true positive adds `1/n` recall at the best precision
/// achieved at or after its rank.
pub fn step_sum_ap(ranked_tp: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut total = 0.0;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            total += best / n_truth as f64;
        }
    }
    total
}

/// Reference evaluator: counts and per-class AP from the quadratic matcher.
pub struct ReferenceReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub per_class_ap: BTreeMap<usize, f64>,
}

pub fn reference_evaluate(dets: &[EvalDetection], truths: &[GroundTruthInstance], thr: f64) -> ReferenceReport {
    let (flags, unmatched) = reference_match(dets, truths, thr);
    let tp = flags.iter().filter(|f| **f).count();
    let mut per_class_ap = BTreeMap::new();
    for t in truths {
        per_class_ap.entry(t.class_id).or_insert(0.0);
    }
    for (&c, ap) in per_class_ap.iter_mut() {
        let d: Vec<EvalDetection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let t: Vec<GroundTruthInstance> = truths.iter().filter(|t| t.class_id == c).cloned().collect();
        let (f, _) = reference_match(&d, &t, thr);
        *ap = step_sum_ap(&f, t.len());
    }
    ReferenceReport {
        tp,
        fp: flags.len() - tp,
        fn_count: unmatched,
        per_class_ap,
    }
}

/// Anchor cost of a fixed anchor set: mean over boxes of the smallest
/// `1 - IoU` to any anchor, shapes co-centered.
pub fn ref_anchor_cost(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    let d = |a: (f64, f64), b: (f64, f64)| {
        let inter = a.0.min(b.0) * a.1.min(b.1);
        1.0 - inter / (a.0 * a.1 + b.0 * b.1 - inter)
    };
    boxes
        .iter()
        .map(|&b| anchors.iter().map(|&a| d(b, a)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / boxes.len() as f64
}

/// Exhaustive search over every split of `boxes` into two non-empty parts,
/// each summarized by its mean shape. Returns the lowest cost found.
pub fn best_two_partition_cost(boxes: &[(f64, f64)]) -> f64 {
    let n = boxes.len();
    assert!((2..=16).contains(&n));
    let mut best = f64::INFINITY;
    // fix box 0 in part A to skip mirrored masks
    for mask in 0..(1u32 << (n - 1)) {
        let in_b = |i: usize| i > 0 && mask & (1 << (i - 1)) != 0;
        let mut sa = (0.0, 0.0, 0usize);
        let mut sb = (0.0, 0.0, 0usize);
        for (i, &(w, h)) in boxes.iter().enumerate() {
            let s = if in_b(i) { &mut sb } else { &mut sa };
            s.0 += w;
            s.1 += h;
            s.2 += 1;
        }
        if sb.2 == 0 {
            continue;
        }
        let anchors = [
            (sa.0 / sa.2 as f64, sa.1 / sa.2 as f64),
            (sb.0 / sb.2 as f64, sb.1 / sb.2 as f64),
        ];
        best = best.min(ref_anchor_cost(boxes, &anchors));
    }
    best
}

/// Ten frames of a single sign (class 1) on a `s x s` grid; frames listed
/// in `absent` carry no sign. Frame `i` is stamped `i * 100` ms.
pub fn persistent_sign_frames(s: usize, absent: &[u64]) -> Vec<signvox::pipeline::FrameRecord> {
    use signvox::decode::encode_layer;
    use signvox::pipeline::{FramePayload, FrameRecord};
    let cfg = GridDecodeConfig::new(s, 3, 4, 0.25).unwrap();
    (0..10u64)
        .map(|i| {
            let dets = if absent.contains(&i) {
                vec![]
            } else {
                vec![Detection {
                    bbox: BoundingBox {
                        cx: 0.40 + 0.01 * i as f64,
                        cy: 0.45,
                        w: 0.08,
                        h: 0.09,
                    },
                    class_id: 1,
                    score: 0.9,
                    cell: None,
                }]
            };
            FrameRecord {
                frame_index: i,
                payload: FramePayload::Tensors(vec![encode_layer(&dets, cfg).unwrap()]),
                capture_ts_ms: Some(i * 100),
            }
        })
        .collect()
}
