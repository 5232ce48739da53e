//! Replay runtime: frames are decoded, suppressed and narrated on the
//! detection thread while a narration worker drains the event queue.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decode::{self, DecodeError, Detection, GridDecodeConfig, RawLayerOutput};
use crate::eval::{self, EvalDetection, EvalError};
use crate::exec::Execution;
use crate::narration::{event_queue, spawn_worker, Enqueued, NarrationError, Narrator, SpeechBackend};
use crate::postprocess::{nms, NmsConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame_index}: {message}")]
    Stream { frame_index: u64, message: String },
    #[error("frame {frame_index}: {source}")]
    Decode {
        frame_index: u64,
        #[source]
        source: DecodeError,
    },
    #[error(transparent)]
    Narration(#[from] NarrationError),
    #[error("{0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FramePayload {
    Tensors(Vec<RawLayerOutput>),
    Detections(Vec<Detection>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub payload: FramePayload,
    /// Monotonic capture time; when absent the pipeline uses wall time
    /// since start.
    pub capture_ts_ms: Option<u64>,
}

/// Frames from a directory of tensor files (`*.bin`, name order).
pub struct TensorDirSource {
    files: std::vec::IntoIter<PathBuf>,
    base: GridDecodeConfig,
    next_index: u64,
    frame_period_ms: Option<u64>,
}

impl TensorDirSource {
    pub fn open(dir: &Path, base: GridDecodeConfig) -> Result<Self, PipelineError> {
        let io_err = |source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err)? {
            let path = entry.map_err(io_err)?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("bin") {
                files.push(path);
            }
        }
        files.sort();
        Ok(Self {
            files: files.into_iter(),
            base,
            next_index: 0,
            frame_period_ms: None,
        })
    }

    /// Stamp frame `i` with capture time `i * period_ms`, so cooldowns
    /// follow the recorded frame rate instead of replay speed.
    pub fn with_frame_period_ms(mut self, period_ms: u64) -> Self {
        self.frame_period_ms = Some(period_ms);
        self
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.len() == 0
    }
}

impl Iterator for TensorDirSource {
    type Item = Result<FrameRecord, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        let frame_index = self.next_index;
        self.next_index += 1;
        let capture_ts_ms = self.frame_period_ms.map(|p| p * frame_index);
        let record = fs::read(&path)
            .map_err(|source| PipelineError::Io { path, source })
            .and_then(|bytes| {
                decode::parse_tensor_frame(&bytes, &self.base)
                    .map_err(|source| PipelineError::Decode { frame_index, source })
            })
            .map(|layers| FrameRecord {
                frame_index,
                payload: FramePayload::Tensors(layers),
                capture_ts_ms,
            });
        Some(record)
    }
}

/// Frames from a detections JSON-lines file; consecutive lines sharing an
/// `image_id` form one frame.
pub fn detection_log_frames<R: BufRead>(r: R) -> Result<Vec<FrameRecord>, EvalError> {
    let dets = eval::read_detections_jsonl(r)?;
    let mut frames: Vec<FrameRecord> = Vec::new();
    let mut current: Option<String> = None;
    for d in dets {
        if current.as_deref() != Some(d.image_id.as_str()) {
            frames.push(FrameRecord {
                frame_index: frames.len() as u64,
                payload: FramePayload::Detections(Vec::new()),
                capture_ts_ms: None,
            });
            current = Some(d.image_id.clone());
        }
        if let Some(FramePayload::Detections(v)) = frames.last_mut().map(|f| &mut f.payload) {
            v.push(Detection {
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
                cell: None,
            });
        }
    }
    Ok(frames)
}

/// Sliding-window frame-rate meter over processing durations.
#[derive(Debug, Clone)]
pub struct FpsMeter {
    window: usize,
    durations_ms: VecDeque<f64>,
}

impl FpsMeter {
    pub fn new(window: usize) -> Result<Self, PipelineError> {
        if window == 0 {
            return Err(PipelineError::Domain("FPS window must be at least one frame".into()));
        }
        Ok(Self {
            window,
            durations_ms: VecDeque::with_capacity(window),
        })
    }

    /// Record one frame and return the window FPS.
    pub fn measure(&mut self, frame_duration_ms: f64) -> Result<f64, PipelineError> {
        if !(frame_duration_ms > 0.0 && frame_duration_ms.is_finite()) {
            return Err(PipelineError::Domain(format!(
                "frame duration {frame_duration_ms} ms must be positive"
            )));
        }
        if self.durations_ms.len() == self.window {
            self.durations_ms.pop_front();
        }
        self.durations_ms.push_back(frame_duration_ms);
        Ok(self.fps())
    }

    /// Frames in the window over their summed duration; 0 before any frame.
    pub fn fps(&self) -> f64 {
        let total: f64 = self.durations_ms.iter().sum();
        if total > 0.0 {
            self.durations_ms.len() as f64 * 1000.0 / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub conf_threshold: f64,
    /// Expected class count; frames whose layers disagree are rejected.
    pub num_classes: Option<usize>,
    pub nms: NmsConfig,
    pub fps_window: usize,
    pub exec: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            num_classes: None,
            nms: NmsConfig::default(),
            fps_window: 30,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineSummary {
    pub frames: u64,
    /// Sum of per-frame NMS output sizes.
    pub detections: u64,
    pub events_produced: u64,
    /// Events that stayed in the queue until the worker took them.
    pub events_emitted: u64,
    pub events_dropped: u64,
    pub spoken: u64,
    pub backend_failures: u64,
    /// Frames per second of detection-loop processing time.
    pub average_fps: f64,
    pub processing_ms: f64,
}

fn frame_detections(frame: FrameRecord, cfg: &PipelineConfig) -> Result<Vec<Detection>, PipelineError> {
    let frame_index = frame.frame_index;
    let wrap = |source| PipelineError::Decode { frame_index, source };
    match frame.payload {
        FramePayload::Tensors(layers) => {
            if let Some(c) = cfg.num_classes {
                if let Some(l) = layers.iter().find(|l| l.config().c != c) {
                    return Err(PipelineError::Stream {
                        frame_index,
                        message: format!("layer has {} classes, expected {c}", l.config().c),
                    });
                }
            }
            let layers = layers
                .into_iter()
                .map(|l| l.with_threshold(cfg.conf_threshold))
                .collect::<Result<Vec<_>, _>>()
                .map_err(wrap)?;
            decode::decode_frame(&layers, cfg.exec).map_err(wrap)
        }
        FramePayload::Detections(mut dets) => {
            dets.retain(|d| d.score >= cfg.conf_threshold);
            decode::sort_ranked(&mut dets);
            Ok(dets)
        }
    }
}

/// Run every frame through decode, NMS and narration.
///
/// Frames must arrive with strictly increasing indices. Kept detections are
/// written to `detection_log` as JSON lines with the frame index as image
/// id. Returns once the source is exhausted and the narration queue drained.
pub fn run_pipeline<S, B>(
    source: S,
    cfg: &PipelineConfig,
    mut narrator: Narrator,
    backend: B,
    mut detection_log: Option<&mut dyn Write>,
) -> Result<PipelineSummary, PipelineError>
where
    S: IntoIterator<Item = Result<FrameRecord, PipelineError>>,
    B: SpeechBackend + 'static,
{
    let (tx, rx) = event_queue(narrator.policy().queue_capacity);
    let worker = spawn_worker(rx, backend);
    let mut meter = FpsMeter::new(cfg.fps_window)?;
    let mut summary = PipelineSummary::default();
    let started = Instant::now();
    let mut last_index: Option<u64> = None;

    let result = (|| {
        for frame in source {
            let frame = frame?;
            let frame_index = frame.frame_index;
            if last_index.is_some_and(|prev| frame_index <= prev) {
                return Err(PipelineError::Stream {
                    frame_index,
                    message: format!("frame index not increasing (previous {})", last_index.unwrap()),
                });
            }
            last_index = Some(frame_index);
            let now_ms = frame
                .capture_ts_ms
                .unwrap_or_else(|| started.elapsed().as_millis() as u64);

            let t0 = Instant::now();
            let kept = nms(&frame_detections(frame, cfg)?, &cfg.nms);
            let events = narrator.observe(frame_index, &kept, now_ms)?;
            for ev in events {
                summary.events_produced += 1;
                if let Enqueued::Evicted(old) = tx.push(ev) {
                    log::info!(
                        "narration queue full, dropped {:?} from frame {}",
                        old.class_name,
                        old.frame_index
                    );
                    summary.events_dropped += 1;
                }
            }
            let elapsed_ms = (t0.elapsed().as_secs_f64() * 1000.0).max(1e-6);
            let fps = meter.measure(elapsed_ms)?;
            log::debug!("frame {frame_index}: {} detections, {fps:.1} FPS", kept.len());

            summary.frames += 1;
            summary.detections += kept.len() as u64;
            summary.processing_ms += elapsed_ms;

            if let Some(log) = detection_log.as_deref_mut() {
                let image_id = frame_index.to_string();
                for d in &kept {
                    let rec = EvalDetection {
                        image_id: image_id.clone(),
                        class_id: d.class_id,
                        score: d.score,
                        bbox: d.bbox,
                    };
                    eval::write_detection_jsonl(&mut *log, &rec).map_err(|source| PipelineError::Io {
                        path: PathBuf::from("<detection log>"),
                        source,
                    })?;
                }
            }
        }
        Ok(())
    })();

    drop(tx);
    let stats = worker.join().expect("narration worker panicked");
    result?;

    summary.events_emitted = summary.events_produced - summary.events_dropped;
    summary.spoken = stats.spoken as u64;
    summary.backend_failures = stats.failed as u64;
    summary.average_fps = if summary.processing_ms > 0.0 {
        summary.frames as f64 * 1000.0 / summary.processing_ms
    } else {
        0.0
    };
    Ok(summary)
}

/// Deterministic replay data for demos, tests and benchmarks.
pub mod synthetic {
    use super::*;

    /// Layer shapes of the synthetic stream: a coarse and a fine grid, like
    /// the two detection scales of a tiny YOLO head.
    pub const LAYER_GRIDS: [usize; 2] = [5, 10];
    pub const BOXES_PER_CELL: usize = 2;
    pub const CLASSES: usize = 4;
    /// Class of the sign present in every frame.
    pub const PERSISTENT_CLASS: usize = 1;

    fn layer(s: usize, rng: &mut ChaCha8Rng) -> (GridDecodeConfig, Vec<f64>) {
        let cfg = GridDecodeConfig::new(s, BOXES_PER_CELL, CLASSES, 0.0).expect("valid synthetic config");
        let stride = cfg.cell_stride();
        let mut values = vec![0.0; cfg.tensor_len()];
        for (cell, chunk) in values.chunks_exact_mut(stride).enumerate() {
            let (row, col) = (cell / s, cell % s);
            for k in 0..BOXES_PER_CELL {
                let b = &mut chunk[5 * k..5 * k + 5];
                b[0] = (col as f64 + rng.gen::<f64>()) / s as f64;
                b[1] = (row as f64 + rng.gen::<f64>()) / s as f64;
                b[2] = rng.gen_range(0.01..0.2);
                b[3] = rng.gen_range(0.01..0.2);
                b[4] = rng.gen_range(0.0..0.08);
            }
            for p in &mut chunk[5 * BOXES_PER_CELL..] {
                *p = rng.gen::<f64>();
            }
        }
        (cfg, values)
    }

    fn place(values: &mut [f64], cfg: &GridDecodeConfig, cx: f64, cy: f64, size: f64, conf: f64, class: usize) {
        let s = cfg.s;
        let col = ((cx * s as f64) as usize).min(s - 1);
        let row = ((cy * s as f64) as usize).min(s - 1);
        let base = (row * s + col) * cfg.cell_stride();
        values[base..base + 5].copy_from_slice(&[cx, cy, size, size * 1.1, conf]);
        let classes = &mut values[base + 5 * cfg.b..base + cfg.cell_stride()];
        classes.iter_mut().for_each(|p| *p *= 0.2);
        classes[class] = 1.0;
    }

    /// `n_frames` frames of two layers each: low-confidence noise, one sign
    /// of [`PERSISTENT_CLASS`] drifting across the image and seen by both
    /// layers, and an occasional second sign.
    pub fn tensor_frames(n_frames: usize, seed: u64) -> Vec<Vec<RawLayerOutput>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_frames)
            .map(|i| {
                let t = i as f64 / n_frames.max(1) as f64;
                let (cx, cy, size) = (0.3 + 0.4 * t, 0.45, 0.06 + 0.04 * t);
                let extra = rng.gen_bool(0.3).then(|| {
                    (
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.6..0.9),
                        rng.gen_range(0..CLASSES),
                    )
                });
                LAYER_GRIDS
                    .iter()
                    .map(|&s| {
                        let (cfg, mut values) = layer(s, &mut rng);
                        let conf = rng.gen_range(0.7..0.95);
                        place(&mut values, &cfg, cx, cy, size, conf, PERSISTENT_CLASS);
                        if let Some((ex, ey, class)) = extra {
                            place(&mut values, &cfg, ex, ey, 0.05, rng.gen_range(0.5..0.9), class);
                        }
                        RawLayerOutput::new(cfg, values).expect("synthetic layer is well-formed")
                    })
                    .collect()
            })
            .collect()
    }

    /// Write frames as `frame_NNNN.bin` into `dir`.
    pub fn write_frames(frames: &[Vec<RawLayerOutput>], dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (i, layers) in frames.iter().enumerate() {
            let mut buf = Vec::new();
            decode::write_tensor_frame(&mut buf, layers)?;
            fs::write(dir.join(format!("frame_{i:04}.bin")), buf)?;
        }
        Ok(())
    }
}
