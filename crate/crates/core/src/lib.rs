//! Non-neural core of a voice-assisted traffic-sign recognizer.
//!
//! - [`geometry`]: center-format boxes and IoU
//! - [`decode`]: `S x S x (5B + C)` detection-layer decoding and the replay
//!   tensor file format
//! - [`postprocess`]: greedy per-class NMS
//! - [`datasets`]: GTSDB / Mapillary to YOLO label conversion, class maps,
//!   seeded train/test split
//! - [`anchors`]: k-means anchor priors under `1 - IoU`
//! - [`eval`]: matching, precision / recall / F1, AP and mAP@50
//! - [`narration`]: cooldown-deduplicated, localized announcements behind a
//!   non-blocking queue
//! - [`pipeline`]: the replay runtime tying it together
//!
//! The batch loops run on rayon when the `parallel` feature is enabled (the
//! default); see [`Execution`].

pub mod anchors;
pub mod datasets;
pub mod decode;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod narration;
pub mod pipeline;
pub mod postprocess;

pub use datasets::{ClassMap, GroundTruthInstance};
pub use decode::{Detection, GridDecodeConfig, RawLayerOutput};
pub use eval::{EvalDetection, EvalReport};
pub use exec::Execution;
pub use geometry::BoundingBox;
