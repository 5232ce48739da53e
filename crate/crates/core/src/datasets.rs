//! Annotation converters: GTSDB CSV and Mapillary JSON in, YOLO label files
//! out, plus the class map and the seeded train/test split.
//!
//! There is deliberately no flip augmentation anywhere in this module:
//! mirrored signs change meaning (curve-left becomes curve-right).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("no image dimensions for {0}")]
    MissingDims(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid geometry for {object}: {source}")]
    Geometry {
        object: String,
        #[source]
        source: GeometryError,
    },
    #[error("class map: {0}")]
    ClassMap(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub class_id: usize,
    /// Label as it appeared in the source dataset, before merging.
    pub source_label: String,
}

/// Something a converter fixed up instead of rejecting, e.g. clamped corners.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionWarning {
    pub location: String,
    pub message: String,
}

/// Canonical class names plus the rules mapping dataset labels onto them.
///
/// Text form, one class per line: `index<TAB>name<TAB>source,labels`.
/// Blank lines and lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    names: Vec<String>,
    rules: HashMap<String, usize>,
    keep: Vec<bool>,
}

const GTSDB_CLASSES: &str = include_str!("../data/gtsdb_classes.tsv");
const MAPILLARY_CLASSES: &str = include_str!("../data/mapillary_classes.tsv");

impl ClassMap {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut entries: Vec<(usize, String, Vec<String>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(DatasetError::ClassMap(format!(
                    "line {}: expected index<TAB>name<TAB>sources",
                    n + 1
                )));
            }
            let index = fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| DatasetError::ClassMap(format!("line {}: bad index {:?}", n + 1, fields[0])))?;
            let name = fields[1].trim().to_string();
            if name.is_empty() {
                return Err(DatasetError::ClassMap(format!("line {}: empty class name", n + 1)));
            }
            let sources = fields
                .get(2)
                .map(|s| {
                    s.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default();
            entries.push((index, name, sources));
        }
        entries.sort_by_key(|e| e.0);
        let mut names = Vec::with_capacity(entries.len());
        let mut rules = HashMap::new();
        for (expected, (index, name, sources)) in entries.into_iter().enumerate() {
            if index != expected {
                return Err(DatasetError::ClassMap(format!(
                    "indices must be dense from 0; missing {expected}"
                )));
            }
            if names.contains(&name) {
                return Err(DatasetError::ClassMap(format!("duplicate class name {name:?}")));
            }
            for src in sources {
                if let Some(prev) = rules.insert(src.clone(), index) {
                    return Err(DatasetError::ClassMap(format!(
                        "source label {src:?} maps to both {prev} and {index}"
                    )));
                }
            }
            names.push(name);
        }
        let keep = vec![true; names.len()];
        Ok(Self { names, rules, keep })
    }

    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// GTSDB raw ids 0..42 grouped into danger / prohibitory / mandatory / others.
    pub fn gtsdb_default() -> Self {
        Self::parse(GTSDB_CLASSES).expect("bundled GTSDB class map")
    }

    /// Placeholder keep-list of eleven Mapillary sign classes.
    pub fn mapillary_default() -> Self {
        Self::parse(MAPILLARY_CLASSES).expect("bundled Mapillary class map")
    }

    /// Restrict the keep-list to `names`; indices are unchanged.
    pub fn with_keep<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self, DatasetError> {
        let mut keep = vec![false; self.names.len()];
        for n in names {
            let i = self
                .index_of(n.as_ref())
                .ok_or_else(|| DatasetError::ClassMap(format!("unknown class {:?}", n.as_ref())))?;
            keep[i] = true;
        }
        self.keep = keep;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_kept(&self, index: usize) -> bool {
        self.keep.get(index).copied().unwrap_or(false)
    }

    /// Canonical index for an exact source label or canonical name.
    fn resolve(&self, label: &str) -> Option<usize> {
        self.rules.get(label).copied().or_else(|| self.index_of(label))
    }
}

/// Strip a `regulatory--` / `warning--` namespace and a trailing `--gN`
/// variant suffix from a Mapillary label.
pub fn strip_label(source_label: &str) -> String {
    let mut parts: Vec<&str> = source_label.split("--").collect();
    if parts.len() > 1 && matches!(parts[0], "regulatory" | "warning") {
        parts.remove(0);
    }
    if parts.len() > 1 {
        let last = parts[parts.len() - 1];
        if last.len() > 1 && last.starts_with('g') && last[1..].bytes().all(|b| b.is_ascii_digit()) {
            parts.pop();
        }
    }
    parts.join("--")
}

/// Canonical class a source label merges into, or `None` if it is not kept.
///
/// `regulatory--X--g1` and `warning--X--g1` land on the same class.
pub fn merge_label<'a>(source_label: &str, class_map: &'a ClassMap) -> Option<&'a str> {
    let index = class_map
        .rules
        .get(source_label)
        .copied()
        .or_else(|| class_map.resolve(&strip_label(source_label)))?;
    class_map.is_kept(index).then(|| class_map.names[index].as_str())
}

/// Parse a dimension sidecar: `filename;width;height` per line.
pub fn parse_image_dims(text: &str) -> Result<HashMap<String, (u32, u32)>, DatasetError> {
    let mut dims = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(';').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [name, w, h] => w
                .parse::<u32>()
                .ok()
                .zip(h.parse::<u32>().ok())
                .map(|d| (name.to_string(), d)),
            _ => None,
        };
        match parsed {
            Some((name, (w, h))) if w > 0 && h > 0 => {
                dims.insert(name, (w, h));
            }
            _ => {
                return Err(DatasetError::Parse {
                    location: format!("dims line {}", n + 1),
                    message: format!("expected filename;width;height, got {line:?}"),
                })
            }
        }
    }
    Ok(dims)
}

fn image_stem(filename: &str) -> String {
    Path::new(filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| filename.to_string())
}

/// Clamp pixel corners into the image, normalize, and build the box.
fn normalize_corners(
    corners: [f64; 4],
    (width, height): (u32, u32),
    object: &str,
    warnings: &mut Vec<ConversionWarning>,
) -> Result<BoundingBox, DatasetError> {
    let [l, t, r, b] = corners;
    let geom = |source| DatasetError::Geometry {
        object: object.to_string(),
        source,
    };
    // validate ordering before clamping so inverted boxes are still rejected
    BoundingBox::from_corner(l, t, r, b).map_err(geom)?;
    let (w, h) = (width as f64, height as f64);
    let clamped = [l.clamp(0.0, w), t.clamp(0.0, h), r.clamp(0.0, w), b.clamp(0.0, h)];
    if clamped != corners {
        let message = format!("corners {corners:?} clamped to image {width}x{height}");
        log::warn!("{object}: {message}");
        warnings.push(ConversionWarning {
            location: object.to_string(),
            message,
        });
    }
    let [l, t, r, b] = clamped;
    let px = BoundingBox::from_corner(l, t, r, b).map_err(geom)?;
    Ok(BoundingBox {
        cx: px.cx / w,
        cy: px.cy / h,
        w: px.w / w,
        h: px.h / h,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conversion {
    pub instances: Vec<GroundTruthInstance>,
    /// Objects whose label is not on the keep-list.
    pub dropped: usize,
    pub warnings: Vec<ConversionWarning>,
}

/// Parse GTSDB ground truth (`filename;left;top;right;bottom;classId`).
///
/// Image ids are the filename stems, so `00001.ppm` becomes `00001`. Raw class
/// ids map through `class_map`; rows whose id is not kept count as dropped.
pub fn parse_gtsdb<R: BufRead>(
    rows: R,
    image_dims: &HashMap<String, (u32, u32)>,
    class_map: &ClassMap,
) -> Result<Conversion, DatasetError> {
    let mut out = Conversion::default();
    for (n, line) in rows.lines().enumerate() {
        let line_no = n + 1;
        let location = format!("line {line_no}");
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::from("<gtsdb annotations>"),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse {
            location: location.clone(),
            message,
        };
        let fields: Vec<&str> = line.split(';').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 ';'-separated fields, got {}",
                fields.len()
            )));
        }
        let mut corners = [0.0; 4];
        for (slot, field) in corners.iter_mut().zip(&fields[1..5]) {
            *slot = field
                .parse::<i64>()
                .map_err(|_| parse_err(format!("non-integer corner {field:?}")))? as f64;
        }
        let raw_class = fields[5];
        raw_class
            .parse::<u32>()
            .map_err(|_| parse_err(format!("non-integer class id {raw_class:?}")))?;
        let filename = fields[0];
        let dims = *image_dims
            .get(filename)
            .ok_or_else(|| DatasetError::MissingDims(filename.to_string()))?;
        let class_id = class_map
            .resolve(raw_class)
            .ok_or_else(|| parse_err(format!("class id {raw_class} not in class map")))?;
        if !class_map.is_kept(class_id) {
            out.dropped += 1;
            continue;
        }
        let bbox = normalize_corners(corners, dims, &format!("{location} ({filename})"), &mut out.warnings)?;
        out.instances.push(GroundTruthInstance {
            image_id: image_stem(filename),
            bbox,
            class_id,
            source_label: raw_class.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct MapillaryDoc {
    width: u32,
    height: u32,
    objects: Vec<MapillaryObject>,
}

#[derive(Debug, Deserialize)]
struct MapillaryObject {
    label: String,
    bbox: PixelBox,
    #[serde(default)]
    key: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PixelBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

/// Convert one Mapillary annotation document for `image_id`.
pub fn parse_mapillary(image_id: &str, doc: &str, class_map: &ClassMap) -> Result<Conversion, DatasetError> {
    let doc: MapillaryDoc = serde_json::from_str(doc).map_err(|e| DatasetError::Schema(format!("{image_id}: {e}")))?;
    if doc.width == 0 || doc.height == 0 {
        return Err(DatasetError::Schema(format!("{image_id}: zero image dimension")));
    }
    let mut out = Conversion::default();
    for (i, obj) in doc.objects.iter().enumerate() {
        let Some(name) = merge_label(&obj.label, class_map) else {
            out.dropped += 1;
            continue;
        };
        let object = match &obj.key {
            Some(key) => format!("{image_id} object {i} ({}, key {key})", obj.label),
            None => format!("{image_id} object {i} ({})", obj.label),
        };
        let b = &obj.bbox;
        let bbox = normalize_corners(
            [b.xmin, b.ymin, b.xmax, b.ymax],
            (doc.width, doc.height),
            &object,
            &mut out.warnings,
        )?;
        out.instances.push(GroundTruthInstance {
            image_id: image_id.to_string(),
            bbox,
            class_id: class_map.index_of(name).expect("merged name is canonical"),
            source_label: obj.label.clone(),
        });
    }
    Ok(out)
}

/// Group instances per image. Every id in `images` gets an entry, even if
/// it has no instances.
pub fn group_by_image<'a>(
    instances: &[GroundTruthInstance],
    images: impl IntoIterator<Item = &'a str>,
) -> BTreeMap<String, Vec<GroundTruthInstance>> {
    let mut grouped: BTreeMap<String, Vec<GroundTruthInstance>> =
        images.into_iter().map(|id| (id.to_string(), Vec::new())).collect();
    for inst in instances {
        grouped.entry(inst.image_id.clone()).or_default().push(inst.clone());
    }
    grouped
}

/// One YOLO label line: `<class> <cx> <cy> <w> <h>`, six decimals.
pub fn format_yolo_line(inst: &GroundTruthInstance) -> String {
    let b = &inst.bbox;
    format!("{} {:.6} {:.6} {:.6} {:.6}\n", inst.class_id, b.cx, b.cy, b.w, b.h)
}

/// Write `<image_id>.txt` per image. Returns the number of files written.
pub fn write_yolo_labels(
    labels: &BTreeMap<String, Vec<GroundTruthInstance>>,
    out_dir: &Path,
) -> Result<usize, DatasetError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (image_id, instances) in labels {
        let path = out_dir.join(format!("{image_id}.txt"));
        let body: String = instances.iter().map(format_yolo_line).collect();
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(labels.len())
}

pub fn parse_yolo_label_text(
    image_id: &str,
    text: &str,
    origin: &str,
) -> Result<Vec<GroundTruthInstance>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::Parse {
            location: format!("{origin}:{}", n + 1),
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| err(format!("non-numeric field {field:?}")))?;
        }
        let bbox = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        out.push(GroundTruthInstance {
            image_id: image_id.to_string(),
            bbox,
            class_id,
            source_label: class_id.to_string(),
        });
    }
    Ok(out)
}

/// Read every `*.txt` label file in `dir`, keyed by file stem. Images with
/// empty label files are present with no instances.
pub fn read_yolo_label_set(dir: &Path) -> Result<BTreeMap<String, Vec<GroundTruthInstance>>, DatasetError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") || !path.is_file() {
            continue;
        }
        let image_id = image_stem(&path.file_name().unwrap().to_string_lossy());
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let instances = parse_yolo_label_text(&image_id, &text, &path.display().to_string())?;
        out.insert(image_id, instances);
    }
    Ok(out)
}

pub fn read_yolo_labels(dir: &Path) -> Result<Vec<GroundTruthInstance>, DatasetError> {
    Ok(read_yolo_label_set(dir)?.into_values().flatten().collect())
}

/// Seeded shuffle, then the first `ceil(n * train_fraction)` ids go to train.
pub fn split_train_test<T: Clone>(ids: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Fraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(ids.len(), train_fraction);
    let (train, test) = order.split_at(n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// `ceil(n * fraction)`, ignoring representation error in the product
/// (`0.7 * 10` is `7.000000000000001` in binary floating point).
pub fn train_count(n: usize, fraction: f64) -> usize {
    let exact = n as f64 * fraction;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    (count as usize).min(n)
}

/// Write `train.txt` and `test.txt`, one id per line.
pub fn write_split_manifest(train: &[String], test: &[String], out_dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (name, ids) in [("train.txt", train), ("test.txt", test)] {
        let path = out_dir.join(name);
        let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCount {
    pub class_id: usize,
    pub name: String,
    pub count: usize,
}

/// Instances per class, in class-map order (every class listed).
pub fn class_distribution(instances: &[GroundTruthInstance], class_map: &ClassMap) -> Vec<ClassCount> {
    let mut counts = vec![0usize; class_map.len()];
    for inst in instances {
        if let Some(c) = counts.get_mut(inst.class_id) {
            *c += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(class_id, count)| ClassCount {
            class_id,
            name: class_map.names[class_id].clone(),
            count,
        })
        .collect()
}
