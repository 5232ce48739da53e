//! Anchor priors by k-means over box shapes with `1 - IoU` distance.
//!
//! Boxes are compared as `(w, h)` shapes on a shared center. Seeding is
//! k-means++ under the same distance, after sorting the input into a
//! canonical order and applying a seeded shuffle, so the result depends only
//! on the multiset of boxes and the seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::centered_iou;

pub const DEFAULT_K: usize = 6;
pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("no boxes to cluster")]
    Empty,
    #[error("k = {k} exceeds the {distinct} distinct box shapes")]
    Infeasible { k: usize, distinct: usize },
    #[error("invalid k-means parameters: {0}")]
    Params(String),
    #[error("box {index} has invalid size ({w}, {h})")]
    InvalidBox { index: usize, w: f64, h: f64 },
}

/// Box shape `(w, h)`.
pub type Shape = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub k: usize,
    /// Sorted by area ascending.
    pub anchors: Vec<Shape>,
    /// Mean `1 - IoU` of every box to its nearest anchor.
    pub final_cost: f64,
    /// Cost after seeding and after each accepted update; non-increasing.
    pub cost_history: Vec<f64>,
}

impl AnchorSet {
    /// Darknet `anchors=` value: pixel `w,h` pairs joined by `", "`.
    pub fn to_darknet(&self, res_w: u32, res_h: u32) -> String {
        self.anchors
            .iter()
            .map(|(w, h)| {
                format!(
                    "{},{}",
                    (w * res_w as f64).round() as i64,
                    (h * res_h as f64).round() as i64
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub exec: Execution,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            exec: Execution::default(),
        }
    }
}

pub fn distance(a: Shape, b: Shape) -> f64 {
    1.0 - centered_iou(a, b)
}

/// Nearest anchor and its distance; ties go to the lowest index.
fn nearest(b: Shape, anchors: &[Shape]) -> (usize, f64) {
    let mut best = (0, distance(b, anchors[0]));
    for (i, &a) in anchors.iter().enumerate().skip(1) {
        let d = distance(b, a);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

struct Assignment {
    labels: Vec<usize>,
    dists: Vec<f64>,
    cost: f64,
}

fn assign(boxes: &[Shape], anchors: &[Shape], exec: Execution) -> Assignment {
    let pairs = exec.map(boxes, |&b| nearest(b, anchors));
    let (labels, dists): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
    let cost = dists.iter().sum::<f64>() / boxes.len() as f64;
    Assignment { labels, dists, cost }
}

/// Cluster index for every box under `anchors`.
pub fn assign_boxes(boxes: &[Shape], anchors: &AnchorSet) -> Vec<usize> {
    boxes.iter().map(|&b| nearest(b, &anchors.anchors).0).collect()
}

/// Mean nearest-anchor distance.
pub fn assignment_cost(boxes: &[Shape], anchors: &[Shape]) -> f64 {
    assign(boxes, anchors, Execution::Sequential).cost
}

fn validate(boxes: &[Shape], k: usize) -> Result<Vec<Shape>, AnchorError> {
    if boxes.is_empty() {
        return Err(AnchorError::Empty);
    }
    if k == 0 {
        return Err(AnchorError::Params("k must be positive".into()));
    }
    for (index, &(w, h)) in boxes.iter().enumerate() {
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(AnchorError::InvalidBox { index, w, h });
        }
    }
    let mut canonical = boxes.to_vec();
    canonical.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut distinct = canonical.clone();
    distinct.dedup();
    if k > distinct.len() {
        return Err(AnchorError::Infeasible {
            k,
            distinct: distinct.len(),
        });
    }
    Ok(canonical)
}

fn seed_centers(pool: &[Shape], k: usize, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let mut centers = vec![pool[0]];
    let mut dmin: Vec<f64> = pool.iter().map(|&b| distance(b, pool[0])).collect();
    while centers.len() < k {
        let total: f64 = dmin.iter().map(|d| d * d).sum();
        // total > 0 whenever fewer than `distinct` centers are placed
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, d) in dmin.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            pick = Some(i);
            target -= d * d;
            if target <= 0.0 {
                break;
            }
        }
        let chosen = pool[pick.expect("a box with positive distance exists")];
        centers.push(chosen);
        for (d, &b) in dmin.iter_mut().zip(pool) {
            *d = d.min(distance(b, chosen));
        }
    }
    centers
}

fn update(boxes: &[Shape], current: &Assignment, k: usize) -> Vec<Shape> {
    // running means stay exact when every member is identical
    let mut means = vec![(0.0, 0.0, 0usize); k];
    for (&(w, h), &c) in boxes.iter().zip(&current.labels) {
        let m = &mut means[c];
        m.2 += 1;
        m.0 += (w - m.0) / m.2 as f64;
        m.1 += (h - m.1) / m.2 as f64;
    }
    let mut spare = current.dists.clone();
    means
        .iter()
        .map(|&(mw, mh, n)| {
            if n > 0 {
                (mw, mh)
            } else {
                // re-seed on the worst-served box; first index wins ties
                let (worst, _) =
                    spare.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &d)| if d > best.1 { (i, d) } else { best },
                    );
                spare[worst] = f64::NEG_INFINITY;
                boxes[worst]
            }
        })
        .collect()
}

pub fn kmeans_anchors(
    boxes: &[Shape],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<AnchorSet, AnchorError> {
    kmeans_anchors_with(
        boxes,
        &KMeansConfig {
            max_iters,
            tol,
            ..KMeansConfig::new(k, seed)
        },
    )
}

/// Lloyd iteration from k-means++ seeds.
///
/// The seeds are snapped to the means of the clusters they induce, and the
/// cost history starts from that first centroid state.
///
/// Stops when assignments stop changing, when an update improves the cost by
/// less than `tol`, or after `max_iters` updates. An update that would raise
/// the cost (the mean is not the `1 - IoU` minimizer) is discarded and ends
/// the run, so the reported cost sequence never increases.
pub fn kmeans_anchors_with(boxes: &[Shape], cfg: &KMeansConfig) -> Result<AnchorSet, AnchorError> {
    if cfg.max_iters == 0 {
        return Err(AnchorError::Params("max_iters must be positive".into()));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(AnchorError::Params(format!(
            "tolerance {} must be non-negative",
            cfg.tol
        )));
    }
    let canonical = validate(boxes, cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = canonical.clone();
    pool.shuffle(&mut rng);

    let seeds = seed_centers(&pool, cfg.k, &mut rng);
    let mut anchors = update(&canonical, &assign(&canonical, &seeds, cfg.exec), cfg.k);
    let mut current = assign(&canonical, &anchors, cfg.exec);
    let mut history = vec![current.cost];

    for _ in 0..cfg.max_iters {
        let next_anchors = update(&canonical, &current, cfg.k);
        let next = assign(&canonical, &next_anchors, cfg.exec);
        if next.cost > current.cost {
            break;
        }
        let unchanged = next.labels == current.labels;
        let gain = current.cost - next.cost;
        anchors = next_anchors;
        current = next;
        history.push(current.cost);
        if unchanged || gain < cfg.tol {
            break;
        }
    }

    anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    let final_cost = assignment_cost(&canonical, &anchors).clamp(0.0, 1.0);
    Ok(AnchorSet {
        k: cfg.k,
        anchors,
        final_cost,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_one_cluster() {
        let boxes = vec![(0.1, 0.2); 100];
        let set = kmeans_anchors(&boxes, 1, 0, 300, 1e-6).unwrap();
        assert_eq!(set.anchors, vec![(0.1, 0.2)]);
        assert_eq!(set.final_cost, 0.0);
    }

    #[test]
    fn k_equals_distinct() {
        let boxes = [(0.4, 0.4), (0.1, 0.1)];
        let set = kmeans_anchors(&boxes, 2, 9, 300, 1e-6).unwrap();
        assert_eq!(set.anchors, vec![(0.1, 0.1), (0.4, 0.4)]);
        assert_eq!(set.final_cost, 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(kmeans_anchors(&[], 1, 0, 10, 0.0), Err(AnchorError::Empty));
        assert_eq!(
            kmeans_anchors(&[(0.1, 0.1), (0.1, 0.1)], 2, 0, 10, 0.0),
            Err(AnchorError::Infeasible { k: 2, distinct: 1 })
        );
        assert!(matches!(
            kmeans_anchors(&[(0.0, 0.1)], 1, 0, 10, 0.0),
            Err(AnchorError::InvalidBox { .. })
        ));
    }

    #[test]
    fn assignment_ties_go_low() {
        let set = AnchorSet {
            k: 3,
            anchors: vec![(0.1, 0.2), (0.2, 0.1), (0.3, 0.3)],
            final_cost: 0.0,
            cost_history: vec![],
        };
        // (0.2, 0.2) is equidistant from the first two anchors
        assert_eq!(assign_boxes(&[(0.2, 0.2), (0.3, 0.3)], &set), vec![0, 2]);
    }

    #[test]
    fn darknet_line() {
        let set = AnchorSet {
            k: 2,
            anchors: vec![(0.0164, 0.023), (0.5, 0.25)],
            final_cost: 0.0,
            cost_history: vec![],
        };
        assert_eq!(set.to_darknet(608, 608), "10,14, 304,152");
    }

    #[test]
    fn permutation_does_not_change_result() {
        let mut boxes: Vec<Shape> = (1..40)
            .map(|i| (0.01 * i as f64, 0.013 * ((i * 7) % 23 + 1) as f64))
            .collect();
        let a = kmeans_anchors(&boxes, 4, 5, 300, 1e-6).unwrap();
        boxes.reverse();
        let b = kmeans_anchors(&boxes, 4, 5, 300, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let boxes: Vec<Shape> = (1..500)
            .map(|i| (0.002 * i as f64, 0.001 * ((i * 13) % 401 + 1) as f64))
            .collect();
        let mut cfg = KMeansConfig::new(6, 3);
        cfg.exec = Execution::Sequential;
        let a = kmeans_anchors_with(&boxes, &cfg).unwrap();
        cfg.exec = Execution::Parallel;
        let b = kmeans_anchors_with(&boxes, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
