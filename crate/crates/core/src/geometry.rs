//! Axis-aligned boxes in center format and the IoU primitive.
//!
//! Every box is stored as `(cx, cy, w, h)`. Corner form only appears at
//! conversion boundaries (annotation files, evaluation fixtures). Units are
//! either normalized image fractions or pixels; callers never mix the two in
//! one call.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate: {0:?}")]
    NonFinite([f64; 4]),
    #[error("negative box size: w={w}, h={h}")]
    NegativeSize { w: f64, h: f64 },
    #[error("inverted corners: left={left}, top={top}, right={right}, bottom={bottom}")]
    InvertedCorners {
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
    },
}

/// Corner form `(left, top, right, bottom)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Checked constructor. Zero-size boxes are allowed.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let v = [self.cx, self.cy, self.w, self.h];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite(v));
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(GeometryError::NegativeSize { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn from_corner(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self, GeometryError> {
        let v = [left, top, right, bottom];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite(v));
        }
        if left > right || top > bottom {
            return Err(GeometryError::InvertedCorners {
                left,
                top,
                right,
                bottom,
            });
        }
        Ok(Self {
            cx: (left + right) / 2.0,
            cy: (top + bottom) / 2.0,
            w: right - left,
            h: bottom - top,
        })
    }

    pub fn to_corner(&self) -> Corners {
        Corners {
            left: self.cx - self.w / 2.0,
            top: self.cy - self.h / 2.0,
            right: self.cx + self.w / 2.0,
            bottom: self.cy + self.h / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection over union without input validation.
    ///
    /// Areas are taken from the corner form so that `b.overlap(&b)` is exactly
    /// 1 for any positive-area box.
    pub fn overlap(&self, other: &BoundingBox) -> f64 {
        let a = self.to_corner();
        let b = other.to_corner();
        let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
        let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
        let inter = iw * ih;
        let area_a = (a.right - a.left) * (a.bottom - a.top);
        let area_b = (b.right - b.left) * (b.bottom - b.top);
        let union = area_a + area_b - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// Shift both center coordinates.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
        }
    }
}

/// Checked IoU: rejects non-finite coordinates and negative sizes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(a.overlap(b))
}

/// IoU of two `(w, h)` shapes placed on a common center.
pub fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bb(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        assert_eq!(iou(&bb(0.2, 0.2, 0.1, 0.1), &bb(0.8, 0.8, 0.1, 0.1)).unwrap(), 0.0);
        // intersection 1x2 = 2, union 4 + 4 - 2 = 6
        let v = iou(&bb(1.0, 1.0, 2.0, 2.0), &bb(2.0, 1.0, 2.0, 2.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_zero_area() {
        let p = bb(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
        assert_eq!(iou(&p, &bb(3.0, 3.0, 1.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_nan() {
        let bad = BoundingBox {
            cx: f64::NAN,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert!(matches!(
            iou(&bad, &bb(0.0, 0.0, 1.0, 1.0)),
            Err(GeometryError::NonFinite(_))
        ));
    }

    #[test]
    fn corner_examples() {
        let c = bb(0.5, 0.5, 1.0, 1.0).to_corner();
        assert_eq!((c.left, c.top, c.right, c.bottom), (0.0, 0.0, 1.0, 1.0));
        let c = bb(1.0, 1.0, 2.0, 2.0).to_corner();
        assert_eq!((c.left, c.top, c.right, c.bottom), (0.0, 0.0, 2.0, 2.0));

        assert_eq!(
            BoundingBox::from_corner(0.0, 0.0, 1.0, 1.0).unwrap(),
            bb(0.5, 0.5, 1.0, 1.0)
        );
        assert_eq!(
            BoundingBox::from_corner(774.0, 411.0, 815.0, 446.0).unwrap(),
            bb(794.5, 428.5, 41.0, 35.0)
        );
        assert_eq!(
            BoundingBox::from_corner(3.0, 3.0, 3.0, 3.0).unwrap(),
            bb(3.0, 3.0, 0.0, 0.0)
        );
        assert!(matches!(
            BoundingBox::from_corner(2.0, 0.0, 1.0, 1.0),
            Err(GeometryError::InvertedCorners { .. })
        ));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.01..50.0f64, 0.01..50.0f64).prop_map(|(cx, cy, w, h)| BoundingBox {
            cx,
            cy,
            w,
            h,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn corner_round_trip(b in arb_box()) {
            let c = b.to_corner();
            let r = BoundingBox::from_corner(c.left, c.top, c.right, c.bottom).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            prop_assert!(rel(r.cx, b.cx) < 1e-12);
            prop_assert!(rel(r.cy, b.cy) < 1e-12);
            prop_assert!(rel(r.w, b.w) < 1e-12);
            prop_assert!(rel(r.h, b.h) < 1e-12);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
        }

        #[test]
        fn iou_translation_and_scale(a in arb_box(), b in arb_box(),
                                     dx in -10.0..10.0f64, dy in -10.0..10.0f64, s in 0.1..10.0f64) {
            let base = iou(&a, &b).unwrap();
            let moved = iou(&a.translated(dx, dy), &b.translated(dx, dy)).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            let scaled = iou(&a.scaled(s), &b.scaled(s)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn iou_one_only_for_identical(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            if (iou(&a, &b).unwrap() - 1.0).abs() < 1e-9 {
                prop_assert!((a.cx - b.cx).abs() < 1e-6 && (a.w - b.w).abs() < 1e-6);
            }
        }
    }
}
