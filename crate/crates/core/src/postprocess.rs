//! Greedy non-maximum suppression.

use crate::decode::{sort_ranked, Detection};

/// Darknet's default suppression overlap.
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    /// Suppress when IoU is strictly greater than this.
    pub iou_threshold: f64,
    pub class_agnostic: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_NMS_IOU,
            class_agnostic: false,
        }
    }
}

impl NmsConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, String> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(format!("NMS IoU threshold {iou_threshold} outside (0, 1]"));
        }
        Ok(Self {
            iou_threshold,
            class_agnostic: false,
        })
    }
}

/// Keep the best detection, drop every remaining same-class (or any-class,
/// when agnostic) detection overlapping it by more than the threshold, repeat.
///
/// Exact duplicates (IoU 1) are always suppressed, so a threshold of 1.0
/// removes duplicates and nothing else.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut ranked = dets.to_vec();
    sort_ranked(&mut ranked);
    let mut kept: Vec<Detection> = Vec::with_capacity(ranked.len());
    for cand in ranked {
        let suppressed = kept.iter().any(|k| {
            (cfg.class_agnostic || k.class_id == cand.class_id)
                && suppresses(k.bbox.overlap(&cand.bbox), cfg.iou_threshold)
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

fn suppresses(iou: f64, threshold: f64) -> bool {
    iou > threshold || iou >= 1.0
}
