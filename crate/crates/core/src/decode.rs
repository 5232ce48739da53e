//! Grid decoding of a YOLO detection-layer tensor.
//!
//! A layer covers an `s x s` grid. Each cell holds `b` box blocks of
//! `(bx, by, bw, bh, conf)` followed by `c` class scores shared by the cell,
//! so a layer is exactly `s * s * (5b + c)` values, cell-major, rows first.
//! Box values are already normalized to the source image.

use std::cmp::Ordering;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::BoundingBox;

/// Network input side used when nothing else is configured.
pub const DEFAULT_INPUT_SIZE: u32 = 608;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("tensor length mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("value {value} at index {index} is outside its valid range")]
    Value { index: usize, value: f64 },
    #[error("cell ({row}, {col}) already holds {capacity} boxes")]
    Capacity { row: usize, col: usize, capacity: usize },
    #[error("cell ({row}, {col}) cannot carry both class {first} and class {second}")]
    ClassConflict {
        row: usize,
        col: usize,
        first: usize,
        second: usize,
    },
    #[error("{0}")]
    Domain(String),
    #[error("malformed tensor record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDecodeConfig {
    pub s: usize,
    pub b: usize,
    pub c: usize,
    pub conf_threshold: f64,
    pub input_w: u32,
    pub input_h: u32,
}

impl GridDecodeConfig {
    pub fn new(s: usize, b: usize, c: usize, conf_threshold: f64) -> Result<Self, DecodeError> {
        let cfg = Self {
            s,
            b,
            c,
            conf_threshold,
            input_w: DEFAULT_INPUT_SIZE,
            input_h: DEFAULT_INPUT_SIZE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.s == 0 || self.b == 0 || self.c == 0 {
            return Err(DecodeError::Config(format!(
                "grid side, boxes per cell and class count must be positive (s={}, b={}, c={})",
                self.s, self.b, self.c
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(DecodeError::Config(format!(
                "confidence threshold {} outside [0, 1]",
                self.conf_threshold
            )));
        }
        for side in [self.input_w, self.input_h] {
            if side == 0 || side % 32 != 0 {
                return Err(DecodeError::Config(format!(
                    "input resolution {side} is not a positive multiple of 32"
                )));
            }
        }
        Ok(())
    }

    /// Values per cell: `5b + c`.
    pub fn cell_stride(&self) -> usize {
        5 * self.b + self.c
    }

    pub fn tensor_len(&self) -> usize {
        self.s * self.s * self.cell_stride()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLayerOutput {
    config: GridDecodeConfig,
    values: Vec<f64>,
}

impl RawLayerOutput {
    pub fn new(config: GridDecodeConfig, values: Vec<f64>) -> Result<Self, DecodeError> {
        config.validate()?;
        let expected = config.tensor_len();
        if values.len() != expected {
            return Err(DecodeError::Shape {
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DecodeError::Value { index, value });
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &GridDecodeConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn with_threshold(mut self, conf_threshold: f64) -> Result<Self, DecodeError> {
        self.config.conf_threshold = conf_threshold;
        self.config.validate()?;
        Ok(self)
    }
}

/// Where a decoded box came from: grid row, grid column, box slot in the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
    /// `None` for detections that did not come out of a grid decode.
    pub cell: Option<GridCell>,
}

impl Detection {
    /// Descending score, then `(row, col, slot)` ascending. Detections
    /// without a cell sort after those with one at equal score.
    pub fn rank_cmp(&self, other: &Detection) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| match (&self.cell, &other.cell) {
                (Some(a), Some(b)) => a.cmp(b),
                (Some(_), None) => Ordering::Less,
                (None, Some(_)) => Ordering::Greater,
                (None, None) => Ordering::Equal,
            })
    }
}

pub fn sort_ranked(dets: &mut [Detection]) {
    dets.sort_by(Detection::rank_cmp);
}

pub fn decode_layer(raw: &RawLayerOutput) -> Vec<Detection> {
    let cfg = &raw.config;
    let stride = cfg.cell_stride();
    let mut out = Vec::new();
    for (cell_index, cell) in raw.values.chunks_exact(stride).enumerate() {
        let (boxes, classes) = cell.split_at(5 * cfg.b);
        // first maximum wins
        let (class_id, class_score) = classes.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, p)| if p > best.1 { (i, p) } else { best },
        );
        for (slot, block) in boxes.chunks_exact(5).enumerate() {
            let score = block[4] * class_score;
            if score >= cfg.conf_threshold {
                out.push(Detection {
                    bbox: BoundingBox {
                        cx: block[0],
                        cy: block[1],
                        w: block[2],
                        h: block[3],
                    },
                    class_id,
                    score,
                    cell: Some(GridCell {
                        row: cell_index / cfg.s,
                        col: cell_index % cfg.s,
                        slot,
                    }),
                });
            }
        }
    }
    sort_ranked(&mut out);
    out
}

/// Inverse of [`decode_layer`] for detections whose class probability is 1.
///
/// Each detection lands in the cell containing its center, in the next free
/// slot. A cell shares one class vector, so all detections in a cell must
/// agree on class.
pub fn encode_layer(dets: &[Detection], config: GridDecodeConfig) -> Result<RawLayerOutput, DecodeError> {
    config.validate()?;
    let s = config.s;
    let stride = config.cell_stride();
    let mut values = vec![0.0; config.tensor_len()];
    let mut used = vec![0usize; s * s];
    let mut cell_class: Vec<Option<usize>> = vec![None; s * s];

    for det in dets {
        if det.class_id >= config.c {
            return Err(DecodeError::Domain(format!(
                "class {} out of range for {} classes",
                det.class_id, config.c
            )));
        }
        let b = &det.bbox;
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(in_unit(b.cx) && in_unit(b.cy) && in_unit(b.w) && in_unit(b.h) && in_unit(det.score)) {
            return Err(DecodeError::Domain(format!(
                "detection {det:?} is not in normalized units"
            )));
        }
        let col = ((b.cx * s as f64).floor() as usize).min(s - 1);
        let row = ((b.cy * s as f64).floor() as usize).min(s - 1);
        let cell = row * s + col;
        if used[cell] == config.b {
            return Err(DecodeError::Capacity {
                row,
                col,
                capacity: config.b,
            });
        }
        match cell_class[cell] {
            Some(first) if first != det.class_id => {
                return Err(DecodeError::ClassConflict {
                    row,
                    col,
                    first,
                    second: det.class_id,
                })
            }
            _ => cell_class[cell] = Some(det.class_id),
        }
        let base = cell * stride;
        let slot = base + 5 * used[cell];
        values[slot..slot + 5].copy_from_slice(&[b.cx, b.cy, b.w, b.h, det.score]);
        values[base + 5 * config.b + det.class_id] = 1.0;
        used[cell] += 1;
    }
    RawLayerOutput::new(config, values)
}

/// Training-target confidence: `pr(object) * IoU`.
pub fn confidence(object_present: bool, iou_with_truth: f64) -> Result<f64, DecodeError> {
    if !(0.0..=1.0).contains(&iou_with_truth) {
        return Err(DecodeError::Domain(format!("IoU {iou_with_truth} outside [0, 1]")));
    }
    Ok(if object_present { iou_with_truth } else { 0.0 })
}

/// Decoded output of one layer together with the class count it was decoded
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDetections {
    pub num_classes: usize,
    pub detections: Vec<Detection>,
}

/// Concatenate per-layer detections and re-rank. No deduplication.
pub fn merge_layers(layers: Vec<LayerDetections>) -> Result<Vec<Detection>, DecodeError> {
    if let Some(first) = layers.first() {
        if let Some(bad) = layers.iter().find(|l| l.num_classes != first.num_classes) {
            return Err(DecodeError::Config(format!(
                "layers disagree on class count ({} vs {})",
                first.num_classes, bad.num_classes
            )));
        }
    }
    let mut out: Vec<Detection> = layers.into_iter().flat_map(|l| l.detections).collect();
    sort_ranked(&mut out);
    Ok(out)
}

/// Decode every layer of a frame and merge the results.
pub fn decode_frame(layers: &[RawLayerOutput], exec: Execution) -> Result<Vec<Detection>, DecodeError> {
    let decoded = exec.map(layers, |raw| LayerDetections {
        num_classes: raw.config.c,
        detections: decode_layer(raw),
    });
    merge_layers(decoded)
}

const HEADER_LEN: usize = 16;

/// Serialize one frame: for each layer a header of four little-endian `u32`
/// (`s, b, c, 0`) followed by the values as little-endian `f64`.
pub fn write_tensor_frame<W: Write>(mut w: W, layers: &[RawLayerOutput]) -> io::Result<()> {
    for layer in layers {
        let cfg = &layer.config;
        for field in [cfg.s as u32, cfg.b as u32, cfg.c as u32, 0u32] {
            w.write_all(&field.to_le_bytes())?;
        }
        for v in &layer.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a frame written by [`write_tensor_frame`]. The grid shape of each
/// layer comes from its header; threshold and input size come from `base`.
pub fn parse_tensor_frame(bytes: &[u8], base: &GridDecodeConfig) -> Result<Vec<RawLayerOutput>, DecodeError> {
    let mut layers = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < HEADER_LEN {
            return Err(DecodeError::Format(format!(
                "truncated header: {} trailing bytes",
                rest.len()
            )));
        }
        let field = |i: usize| u32::from_le_bytes(rest[4 * i..4 * i + 4].try_into().unwrap());
        let (s, b, c, reserved) = (field(0), field(1), field(2), field(3));
        if reserved != 0 {
            return Err(DecodeError::Format(format!(
                "reserved header field is {reserved}, expected 0"
            )));
        }
        let cfg = GridDecodeConfig {
            s: s as usize,
            b: b as usize,
            c: c as usize,
            ..*base
        };
        cfg.validate()?;
        let n = cfg.tensor_len();
        let body = &rest[HEADER_LEN..];
        if body.len() < 8 * n {
            return Err(DecodeError::Shape {
                expected: n,
                actual: body.len() / 8,
            });
        }
        let values = body[..8 * n]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        layers.push(RawLayerOutput::new(cfg, values)?);
        rest = &body[8 * n..];
    }
    Ok(layers)
}

pub fn read_tensor_frame<R: Read>(mut r: R, base: &GridDecodeConfig) -> Result<Vec<RawLayerOutput>, DecodeError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_tensor_frame(&buf, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox { cx, cy, w: 0.1, h: 0.1 },
            class_id,
            score,
            cell: None,
        }
    }

    #[test]
    fn tiny_yolo_tensor_shape() {
        let cfg = GridDecodeConfig::new(7, 2, 4, 0.5).unwrap();
        assert_eq!(cfg.tensor_len(), 686);
    }

    #[test]
    fn shape_error_names_lengths() {
        let cfg = GridDecodeConfig::new(7, 2, 4, 0.5).unwrap();
        let err = RawLayerOutput::new(cfg, vec![0.0; 685]).unwrap_err();
        assert!(matches!(
            err,
            DecodeError::Shape {
                expected: 686,
                actual: 685
            }
        ));
        assert!(err.to_string().contains("686") && err.to_string().contains("685"));
    }

    #[test]
    fn zero_tensor_decodes_to_nothing() {
        let cfg = GridDecodeConfig::new(7, 2, 4, 0.01).unwrap();
        let raw = RawLayerOutput::new(cfg, vec![0.0; 686]).unwrap();
        assert!(decode_layer(&raw).is_empty());
    }

    #[test]
    fn input_resolution_must_be_multiple_of_32() {
        let mut cfg = GridDecodeConfig::new(19, 3, 11, 0.25).unwrap();
        cfg.input_w = 600;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_empty_is_zero() {
        let cfg = GridDecodeConfig::new(5, 2, 3, 0.1).unwrap();
        let raw = encode_layer(&[], cfg).unwrap();
        assert!(raw.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_center_detection_goes_to_center_cell() {
        let cfg = GridDecodeConfig::new(7, 2, 4, 0.1).unwrap();
        let raw = encode_layer(&[det(0.5, 0.5, 2, 0.9)], cfg).unwrap();
        // floor(0.5 * 7) = 3
        let center = (3 * 7 + 3) * cfg.cell_stride();
        for (i, &v) in raw.values().iter().enumerate() {
            let in_first_block = (center..center + 5).contains(&i);
            let is_class = i == center + 10 + 2;
            if v != 0.0 {
                assert!(in_first_block || is_class, "unexpected value at {i}");
            }
        }
        let back = decode_layer(&raw);
        assert_eq!(back.len(), 1);
        assert_eq!(
            back[0].cell,
            Some(GridCell {
                row: 3,
                col: 3,
                slot: 0
            })
        );
        assert_eq!(back[0].score, 0.9);
    }

    #[test]
    fn encode_capacity_and_class_conflict() {
        let cfg = GridDecodeConfig::new(2, 1, 3, 0.1).unwrap();
        let err = encode_layer(&[det(0.1, 0.1, 0, 0.5), det(0.2, 0.2, 0, 0.6)], cfg).unwrap_err();
        assert!(matches!(
            err,
            DecodeError::Capacity {
                row: 0,
                col: 0,
                capacity: 1
            }
        ));
        let cfg = GridDecodeConfig::new(2, 2, 3, 0.1).unwrap();
        let err = encode_layer(&[det(0.1, 0.1, 0, 0.5), det(0.2, 0.2, 1, 0.6)], cfg).unwrap_err();
        assert!(matches!(err, DecodeError::ClassConflict { .. }));
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(confidence(false, 0.9).unwrap(), 0.0);
        assert_eq!(confidence(true, 0.7).unwrap(), 0.7);
        assert_eq!(confidence(true, 1.0).unwrap(), 1.0);
        assert!(confidence(true, 1.5).is_err());
        assert!(confidence(true, -0.1).is_err());
    }

    #[test]
    fn merge_cases() {
        let x = Detection {
            cell: Some(GridCell {
                row: 0,
                col: 0,
                slot: 0,
            }),
            ..det(0.5, 0.5, 0, 0.8)
        };
        let layer = |d: Vec<Detection>| LayerDetections {
            num_classes: 3,
            detections: d,
        };
        assert_eq!(
            merge_layers(vec![layer(vec![x.clone()]), layer(vec![])]).unwrap(),
            vec![x.clone()]
        );
        assert!(merge_layers(vec![layer(vec![]), layer(vec![])]).unwrap().is_empty());

        let a: Vec<_> = [0.9, 0.5, 0.1].iter().map(|&s| det(0.2, 0.2, 0, s)).collect();
        let b: Vec<_> = [0.7, 0.6, 0.2].iter().map(|&s| det(0.8, 0.8, 1, s)).collect();
        let merged = merge_layers(vec![layer(a), layer(b)]).unwrap();
        let scores: Vec<f64> = merged.iter().map(|d| d.score).collect();
        // sort oracle
        let mut expected = vec![0.9, 0.5, 0.1, 0.7, 0.6, 0.2];
        expected.sort_by(|a: &f64, b| b.partial_cmp(a).unwrap());
        assert_eq!(scores, expected);

        let err = merge_layers(vec![
            layer(vec![]),
            LayerDetections {
                num_classes: 4,
                detections: vec![],
            },
        ]);
        assert!(matches!(err, Err(DecodeError::Config(_))));
    }

    #[test]
    fn tensor_file_round_trip() {
        let c1 = GridDecodeConfig::new(3, 2, 2, 0.3).unwrap();
        let c2 = GridDecodeConfig::new(6, 2, 2, 0.3).unwrap();
        let l1 = encode_layer(&[det(0.5, 0.5, 1, 0.8)], c1).unwrap();
        let l2 = encode_layer(&[det(0.1, 0.9, 0, 0.4)], c2).unwrap();
        let mut buf = Vec::new();
        write_tensor_frame(&mut buf, &[l1.clone(), l2.clone()]).unwrap();
        assert_eq!(buf.len(), 2 * 16 + 8 * (c1.tensor_len() + c2.tensor_len()));
        let back = parse_tensor_frame(&buf, &c1).unwrap();
        assert_eq!(back, vec![l1, l2]);

        assert!(matches!(
            parse_tensor_frame(&buf[..10], &c1),
            Err(DecodeError::Format(_))
        ));
        assert!(matches!(
            parse_tensor_frame(&buf[..40], &c1),
            Err(DecodeError::Shape { .. })
        ));
    }

    /// Straightforward triple loop over cells, boxes and classes.
    fn naive_decode(values: &[f64], s: usize, b: usize, c: usize, thr: f64) -> Vec<(usize, usize, usize, usize, f64)> {
        let mut out = Vec::new();
        for row in 0..s {
            for col in 0..s {
                let base = (row * s + col) * (5 * b + c);
                for k in 0..b {
                    let mut best = 0;
                    for j in 1..c {
                        if values[base + 5 * b + j] > values[base + 5 * b + best] {
                            best = j;
                        }
                    }
                    let score = values[base + 5 * k + 4] * values[base + 5 * b + best];
                    if score >= thr {
                        out.push((row, col, k, best, score));
                    }
                }
            }
        }
        out
    }

    fn arb_tensor() -> impl Strategy<Value = (usize, usize, usize, f64, Vec<f64>)> {
        (1..=4usize, 1..=2usize, 1..=3usize, 0.0..1.0f64).prop_flat_map(|(s, b, c, thr)| {
            let n = s * s * (5 * b + c);
            (
                Just(s),
                Just(b),
                Just(c),
                Just(thr),
                proptest::collection::vec(0.0..=1.0f64, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_naive_decoder((s, b, c, thr, values) in arb_tensor()) {
            let cfg = GridDecodeConfig::new(s, b, c, thr).unwrap();
            let raw = RawLayerOutput::new(cfg, values.clone()).unwrap();
            let got = decode_layer(&raw);
            let mut want = naive_decode(&values, s, b, c, thr);
            want.sort_by(|x, y| y.4.total_cmp(&x.4).then((x.0, x.1, x.2).cmp(&(y.0, y.1, y.2))));
            prop_assert_eq!(got.len(), want.len());
            prop_assert!(got.len() <= s * s * b);
            for (g, w) in got.iter().zip(&want) {
                let cell = g.cell.unwrap();
                prop_assert_eq!((cell.row, cell.col, cell.slot, g.class_id), (w.0, w.1, w.2, w.3));
                prop_assert_eq!(g.score, w.4);
                prop_assert!(g.score >= thr && g.class_id < c);
            }
        }

        #[test]
        fn threshold_monotone((s, b, c, t1, values) in arb_tensor(), dt in 0.0..0.5f64) {
            let t2 = (t1 + dt).min(1.0);
            let low = decode_layer(&RawLayerOutput::new(GridDecodeConfig::new(s, b, c, t1).unwrap(), values.clone()).unwrap());
            let high = decode_layer(&RawLayerOutput::new(GridDecodeConfig::new(s, b, c, t2).unwrap(), values).unwrap());
            prop_assert!(high.iter().all(|d| low.contains(d)));
        }
    }
}
