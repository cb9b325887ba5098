//! Axis-aligned boxes in pixel space.
//!
//! Boxes are stored as top-left corner plus extent, the same layout the
//! annotation interchange files use. Center form exists only at conversion
//! boundaries ([`BBox::from_center`] / [`BBox::to_center`]).

use serde::{Deserialize, Serialize};

/// Top-left anchored box with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Center-anchored box `{x_c, y_c, w, h}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Returns `None` unless both sides are finite and positive.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Option<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        (finite && w > 0.0 && h > 0.0).then_some(Self { x, y, w, h })
    }

    /// Builds a box from its corners; `None` if the corners do not span a positive area.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Center form. Exact: only halving and one addition are involved.
    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: self.x + self.w / 2.0,
            cy: self.y + self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }

    pub fn from_center(c: CenterBox) -> Option<Self> {
        Self::new(c.cx - c.w / 2.0, c.cy - c.h / 2.0, c.w, c.h)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    /// Intersection rectangle, `None` when the boxes share no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        BBox::from_corners(x0, y0, x1, y1)
    }

    /// True when `other` lies entirely inside `self` (shared edges allowed).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Clamps the box to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, and zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let inter = inter.area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Area of the union of a set of rectangles, computed by sweeping x-slabs.
pub fn union_area(rects: &[BBox]) -> f64 {
    if rects.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x, r.right()]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut total = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(rects.len());
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            rects
                .iter()
                .filter(|r| r.x <= x0 && r.right() >= x1)
                .map(|r| (r.y, r.bottom())),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(s, e) in &spans[1..] {
            if s > hi {
                covered += hi - lo;
                lo = s;
                hi = e;
            } else if e > hi {
                hi = e;
            }
        }
        covered += hi - lo;
        total += covered * (x1 - x0);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(3.0, 4.0, 10.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(100.0, 100.0, 5.0, 5.0)), 0.0);
        // Touching edges share no area.
        assert_eq!(iou(&a, &b(13.0, 4.0, 5.0, 5.0)), 0.0);
    }

    #[test]
    fn iou_half_shifted() {
        // Intersection 50, union 150.
        let v = iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 10.0, 10.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_none());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_none());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_none());
    }

    #[test]
    fn clamp_right_edge() {
        let c = b(600.0, 10.0, 45.0, 20.0).clamp_to(640.0, 480.0).unwrap();
        assert_eq!(c.right(), 640.0);
        assert_eq!(c.w, 40.0);
    }

    #[test]
    fn union_area_overlapping() {
        let rects = [b(0.0, 0.0, 10.0, 10.0), b(5.0, 5.0, 10.0, 10.0)];
        assert_eq!(union_area(&rects), 175.0);
        let nested = [b(0.0, 0.0, 10.0, 10.0), b(2.0, 2.0, 3.0, 3.0)];
        assert_eq!(union_area(&nested), 100.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    // Dyadic coordinates make center conversion exact in both directions.
    fn arb_dyadic_box() -> impl Strategy<Value = BBox> {
        (-4096i32..4096, -4096i32..4096, 1i32..4096, 1i32..4096).prop_map(|(x, y, w, h)| {
            b(x as f64 / 4.0, y as f64 / 4.0, w as f64 / 4.0, h as f64 / 4.0)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn center_roundtrip_exact(a in arb_dyadic_box()) {
            let back = BBox::from_center(a.to_center()).unwrap();
            prop_assert_eq!(back, a);
            let c = a.to_center();
            prop_assert_eq!(BBox::from_center(c).unwrap().to_center(), c);
        }

        #[test]
        fn union_area_bounds(rs in proptest::collection::vec(arb_box(), 1..6)) {
            let u = union_area(&rs);
            let max_single = rs.iter().map(BBox::area).fold(0.0, f64::max);
            let sum: f64 = rs.iter().map(BBox::area).sum();
            prop_assert!(u + 1e-9 >= max_single);
            prop_assert!(u <= sum + 1e-9);
        }
    }
}
