//! Box representations and overlap/distance primitives.
//!
//! Everything here works in normalized image coordinates: a box is
//! `(cx, cy, w, h)` with every field a fraction of the image side.
//! Pixel-space conversion happens only at ingestion and rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form of a box, used internally for area computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box and rejects non-finite or out-of-range fields.
    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{b:?}")))
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// All four fields finite and inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.to_array()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Zero-area boxes are representable but never count as real objects.
    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_corners(self) -> CornerBox {
        CornerBox {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    /// Clamps every field into `[0, 1]` and the extent to at least `min_extent`.
    pub fn clamped(self, min_extent: f64) -> Self {
        Self {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(min_extent, 1.0),
            h: self.h.clamp(min_extent, 1.0),
        }
    }

    /// Converts an absolute-pixel `(x, y, w, h)` top-left box.
    pub fn from_xywh_pixels(xywh: [f64; 4], image_w: f64, image_h: f64) -> Self {
        let [x, y, w, h] = xywh;
        Self::new(
            (x + w / 2.0) / image_w,
            (y + h / 2.0) / image_h,
            w / image_w,
            h / image_h,
        )
    }

    pub fn to_xywh_pixels(self, image_w: f64, image_h: f64) -> [f64; 4] {
        let w = self.w * image_w;
        let h = self.h * image_h;
        [
            self.cx * image_w - w / 2.0,
            self.cy * image_h - h / 2.0,
            w,
            h,
        ]
    }
}

impl CornerBox {
    pub fn to_center(self) -> BoundingBox {
        BoundingBox::new(
            (self.x0 + self.x1) / 2.0,
            (self.y0 + self.y1) / 2.0,
            self.x1 - self.x0,
            self.y1 - self.y0,
        )
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn clipped(self) -> Self {
        Self {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        }
    }
}

fn intersection(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn generalized_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let enclosing = (ca.x1.max(cb.x1) - ca.x0.min(cb.x0)) * (ca.y1.max(cb.y1) - ca.y0.min(cb.y0));
    if enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

/// GIoU of `pred` against `target` together with its gradient with respect
/// to `pred`'s `(cx, cy, w, h)`. Piecewise-smooth; at ties of min/max the
/// branch taking `pred`'s coordinate is used.
pub fn generalized_iou_with_grad(pred: &BoundingBox, target: &BoundingBox) -> (f64, [f64; 4]) {
    let p = pred.to_corners();
    let t = target.to_corners();

    let (ix0, ix1) = (p.x0.max(t.x0), p.x1.min(t.x1));
    let (iy0, iy1) = (p.y0.max(t.y0), p.y1.min(t.y1));
    let iw = ix1 - ix0;
    let ih = iy1 - iy0;
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let pw = p.x1 - p.x0;
    let ph = p.y1 - p.y0;
    let area_p = pw.max(0.0) * ph.max(0.0);
    let union = area_p + t.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (ex0, ex1) = (p.x0.min(t.x0), p.x1.max(t.x1));
    let (ey0, ey1) = (p.y0.min(t.y0), p.y1.max(t.y1));
    let ew = ex1 - ex0;
    let eh = ey1 - ey0;
    let enclosing = ew * eh;
    if enclosing <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (enclosing - union) / enclosing;

    // Partials with respect to the corners (x0, y0, x1, y1) of pred.
    let mut d_inter = [0.0; 4];
    if overlapping {
        if p.x0 >= t.x0 {
            d_inter[0] = -ih;
        }
        if p.x1 <= t.x1 {
            d_inter[2] = ih;
        }
        if p.y0 >= t.y0 {
            d_inter[1] = -iw;
        }
        if p.y1 <= t.y1 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ph, -pw, ph, pw];
    let mut d_encl = [0.0; 4];
    if p.x0 <= t.x0 {
        d_encl[0] = -eh;
    }
    if p.x1 >= t.x1 {
        d_encl[2] = eh;
    }
    if p.y0 <= t.y0 {
        d_encl[1] = -ew;
    }
    if p.y1 >= t.y1 {
        d_encl[3] = ew;
    }

    // value = I/U - 1 + U/E
    let mut d_corner = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        d_corner[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / enclosing
            - union * d_encl[i] / (enclosing * enclosing);
    }
    // x0 = cx - w/2, x1 = cx + w/2 (likewise y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (value, grad)
}

/// Sum of absolute component differences.
pub fn l1_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h)
    }

    #[test]
    fn corners_examples() {
        let c = b(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.0, 0.0, 1.0, 1.0));
        let c = b(0.5, 0.5, 0.5, 0.5).to_corners();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.25, 0.25, 0.75, 0.75));
        let c = b(0.75, 0.5, 0.5, 0.5).to_corners();
        assert_eq!((c.x0, c.y0, c.x1, c.y1), (0.5, 0.25, 1.0, 0.75));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.2, 0.2, 0.1, 0.1), &b(0.8, 0.8, 0.1, 0.1)), 0.0);
        // overlap 0.25 * 0.5 = 0.125, union 0.25 + 0.25 - 0.125 = 0.375
        let v = iou(&b(0.5, 0.5, 0.5, 0.5), &b(0.75, 0.5, 0.5, 0.5));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&b(0.5, 0.5, 0.0, 0.0), &b(0.5, 0.5, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert!((generalized_iou(&a, &a) - 1.0).abs() < 1e-15);
        let v = generalized_iou(&b(0.5, 0.5, 0.5, 0.5), &b(0.75, 0.5, 0.5, 0.5));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // enclosing ~ 0.98^2, union 2 * 0.0001
        let v = generalized_iou(&b(0.01, 0.01, 0.01, 0.01), &b(0.99, 0.99, 0.01, 0.01));
        let enclosing = 0.99f64 * 0.99;
        let expected = -(enclosing - 0.0002) / enclosing;
        assert!(v < 0.0);
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let a = b(0.5, 0.5, 0.5, 0.5);
        assert_eq!(l1_distance(&a, &a), 0.0);
        assert!((l1_distance(&a, &b(0.6, 0.5, 0.5, 0.5)) - 0.1).abs() < 1e-15);
        let v = l1_distance(&b(0.1, 0.2, 0.3, 0.4), &b(0.2, 0.4, 0.1, 0.1));
        assert!((v - 0.8).abs() < 1e-15);
    }

    #[test]
    fn validity_and_pixels() {
        assert!(BoundingBox::try_new(0.5, 0.5, 1.2, 0.1).is_err());
        assert!(BoundingBox::try_new(f64::NAN, 0.5, 0.1, 0.1).is_err());
        assert!(b(0.5, 0.5, 0.0, 0.2).is_degenerate());
        let n = BoundingBox::from_xywh_pixels([10.0, 20.0, 30.0, 40.0], 100.0, 100.0);
        assert!((n.cx - 0.25).abs() < 1e-15 && (n.cy - 0.40).abs() < 1e-15);
        assert!((n.w - 0.30).abs() < 1e-15 && (n.h - 0.40).abs() < 1e-15);
        let back = n.to_xywh_pixels(100.0, 100.0);
        for (x, y) in back.iter().zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn central_diff(pred: BoundingBox, target: &BoundingBox, k: usize) -> f64 {
        let h = 1e-6;
        let mut hi = pred.to_array();
        let mut lo = pred.to_array();
        hi[k] += h;
        lo[k] -= h;
        (generalized_iou(&BoundingBox::from_array(hi), target)
            - generalized_iou(&BoundingBox::from_array(lo), target))
            / (2.0 * h)
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let cases = [
            (b(0.5, 0.5, 0.3, 0.2), b(0.55, 0.45, 0.25, 0.32)),
            (b(0.2, 0.3, 0.1, 0.1), b(0.7, 0.8, 0.2, 0.15)),
            (b(0.4, 0.6, 0.5, 0.4), b(0.45, 0.52, 0.2, 0.2)),
        ];
        for (p, t) in cases {
            let (v, g) = generalized_iou_with_grad(&p, &t);
            assert!((v - generalized_iou(&p, &t)).abs() < 1e-15);
            for k in 0..4 {
                let fd = central_diff(p, &t, k);
                assert!(
                    (fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "k={k} fd={fd} an={}",
                    g[k]
                );
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.5, 0.01f64..0.5)
            .prop_map(|(cx, cy, w, h)| b(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), c in arb_box()) {
            let g = generalized_iou(&a, &c);
            let i = iou(&a, &c);
            prop_assert!(g <= i + 1e-15);
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn corner_round_trip(a in arb_box()) {
            let back = a.to_corners().to_center();
            for (x, y) in back.to_array().iter().zip(a.to_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn l1_triangle_inequality(a in arb_box(), c in arb_box(), d in arb_box()) {
            prop_assert!(l1_distance(&a, &d) <= l1_distance(&a, &c) + l1_distance(&c, &d) + 1e-12);
        }

        #[test]
        fn giou_grad_agrees_with_fd(a in arb_box(), c in arb_box()) {
            let (_, g) = generalized_iou_with_grad(&a, &c);
            for k in 0..4 {
                let fd = central_diff(a, &c, k);
                // Kinks (min/max switches) can sit inside the stencil; only
                // check where the two one-sided slopes agree.
                let h = 1e-6;
                let mut hi = a.to_array(); hi[k] += h;
                let mut lo = a.to_array(); lo[k] -= h;
                let base = generalized_iou(&a, &c);
                let right = (generalized_iou(&BoundingBox::from_array(hi), &c) - base) / h;
                let left = (base - generalized_iou(&BoundingBox::from_array(lo), &c)) / h;
                if (right - left).abs() < 1e-4 {
                    prop_assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
