//! 7-DoF boxes, regression encodings, and rotated bird's-eye-view IoU.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Ground-truth box: center, dimensions, yaw in `(-pi, pi]`, class id.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxLabel {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: usize,
}

impl BoxLabel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cx: f64,
        cy: f64,
        cz: f64,
        l: f64,
        w: f64,
        h: f64,
        yaw: f64,
        class_id: usize,
    ) -> Result<Self> {
        let b = BoxLabel {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box label"));
        }
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Invalid("box dimensions must be strictly positive".into()));
        }
        if !(self.yaw > -core::f64::consts::PI - 1e-12 && self.yaw <= core::f64::consts::PI + 1e-12)
        {
            return Err(Error::Invalid("box yaw must lie in (-pi, pi]".into()));
        }
        Ok(())
    }

    /// BEV area in square meters.
    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }
}

/// Decoded head output: box geometry plus a per-class score vector in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrediction {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub scores: Vec<f64>,
}

impl BoxPrediction {
    /// Highest-scoring class and its score (ties pick the lower class id).
    pub fn best_class(&self) -> (usize, f64) {
        let mut best = 0usize;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        (best, self.scores[best])
    }

    /// Geometry as a label carrying the argmax class.
    pub fn to_label(&self) -> BoxLabel {
        BoxLabel {
            cx: self.cx,
            cy: self.cy,
            cz: self.cz,
            l: self.l,
            w: self.w,
            h: self.h,
            yaw: self.yaw,
            class_id: self.best_class().0,
        }
    }
}

/// Number of regression channels: `(dx, dy, dz, log_l, log_w, log_h, sin, cos)`.
pub const ENCODING_DIM: usize = 8;

/// Regression target for a box anchored at a voxel center.
pub fn encode_box(b: &BoxLabel, voxel_center: (f64, f64)) -> [f64; ENCODING_DIM] {
    [
        b.cx - voxel_center.0,
        b.cy - voxel_center.1,
        b.cz,
        math::ln(b.l),
        math::ln(b.w),
        math::ln(b.h),
        math::sin(b.yaw),
        math::cos(b.yaw),
    ]
}

/// Inverse of [`encode_box`]: dims through `exp`, yaw through `atan2`
/// (with `atan2(0, 0)` defined as 0). Rejects non-finite encodings.
pub fn decode_box(
    enc: &[f64],
    voxel_center: (f64, f64),
    scores: Vec<f64>,
) -> Result<BoxPrediction> {
    if enc.len() != ENCODING_DIM {
        return Err(Error::DimensionMismatch {
            context: "box encoding",
            expected: ENCODING_DIM,
            got: enc.len(),
        });
    }
    if enc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box encoding"));
    }
    Ok(BoxPrediction {
        cx: voxel_center.0 + enc[0],
        cy: voxel_center.1 + enc[1],
        cz: enc[2],
        l: math::exp(enc[3]),
        w: math::exp(enc[4]),
        h: math::exp(enc[5]),
        yaw: math::atan2(enc[6], enc[7]),
        scores,
    })
}

/// BEV corners in counterclockwise order.
pub fn bev_corners(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> [(f64, f64); 4] {
    let (s, c) = (math::sin(yaw), math::cos(yaw));
    let (hl, hw) = (l * 0.5, w * 0.5);
    let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    let mut out = [(0.0, 0.0); 4];
    for (i, (lx, ly)) in local.iter().enumerate() {
        out[i] = (cx + c * lx - s * ly, cy + s * lx + c * ly);
    }
    out
}

/// Shoelace area of a simple polygon (positive for counterclockwise order).
fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc * 0.5
}

/// Clips `subject` against the half-plane left of directed edge `a -> b`.
fn clip_halfplane(subject: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let mut out = Vec::with_capacity(subject.len() + 4);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in != prev_in {
            // Edge crosses the boundary; add the intersection point.
            let dx = cur.0 - prev.0;
            let dy = cur.1 - prev.1;
            let denom = (b.0 - a.0) * dy - (b.1 - a.1) * dx;
            if denom != 0.0 {
                let t = ((b.0 - a.0) * (a.1 - prev.1) - (b.1 - a.1) * (a.0 - prev.0)) / denom;
                out.push((prev.0 + t * dx, prev.1 + t * dy));
            }
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

/// Area of the intersection of two convex polygons (Sutherland-Hodgman).
fn convex_intersection_area(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut poly: Vec<(f64, f64)> = a.to_vec();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_halfplane(&poly, b[i], b[(i + 1) % b.len()]);
    }
    math::abs(polygon_area(&poly))
}

/// Exact BEV IoU of two rotated rectangles via convex polygon clipping.
pub fn rotated_iou_bev(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let ca = bev_corners(a.cx, a.cy, a.l, a.w, a.yaw);
    let cb = bev_corners(b.cx, b.cy, b.l, b.w, b.yaw);
    let inter = convex_intersection_area(&ca, &cb);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_box(cx: f64, cy: f64, l: f64, w: f64) -> BoxLabel {
        BoxLabel::new(cx, cy, 0.5, l, w, 1.0, 0.0, 0).unwrap()
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = BoxLabel::new(1.0, -2.0, 0.5, 4.2, 1.9, 1.5, 0.7, 0).unwrap();
        assert!((rotated_iou_bev(&b, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = axis_box(0.0, 0.0, 1.0, 1.0);
        let b = axis_box(5.0, 5.0, 1.0, 1.0);
        assert_eq!(rotated_iou_bev(&a, &b), 0.0);
    }

    #[test]
    fn half_offset_unit_squares_give_one_third() {
        let a = axis_box(0.0, 0.0, 1.0, 1.0);
        let b = axis_box(0.5, 0.0, 1.0, 1.0);
        assert!((rotated_iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let a = BoxLabel::new(0.3, 0.1, 0.0, 2.0, 1.0, 1.0, 0.4, 0).unwrap();
        let b = BoxLabel::new(-0.2, 0.6, 0.0, 1.5, 1.2, 1.0, -1.1, 0).unwrap();
        let ab = rotated_iou_bev(&a, &b);
        let ba = rotated_iou_bev(&b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
        assert!(ab > 0.0);
    }

    #[test]
    fn iou_invariant_under_rigid_transforms() {
        let a = BoxLabel::new(0.3, 0.1, 0.0, 2.0, 1.0, 1.0, 0.4, 0).unwrap();
        let b = BoxLabel::new(-0.2, 0.6, 0.0, 1.5, 1.2, 1.0, -1.1, 0).unwrap();
        let base = rotated_iou_bev(&a, &b);
        let (tx, ty, rot) = (3.7, -1.9, 0.83);
        let apply = |x: &BoxLabel| {
            let (s, c) = (math::sin(rot), math::cos(rot));
            BoxLabel {
                cx: c * x.cx - s * x.cy + tx,
                cy: s * x.cx + c * x.cy + ty,
                yaw: x.yaw + rot,
                ..x.clone()
            }
        };
        let moved = rotated_iou_bev(&apply(&a), &apply(&b));
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn rotated_square_against_itself_rotated_45_degrees() {
        // Unit square vs the same square rotated by 45 degrees: the analytic
        // intersection is a regular octagon with area 2*(sqrt(2)-1).
        let a = axis_box(0.0, 0.0, 1.0, 1.0);
        let b = BoxLabel::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, core::f64::consts::FRAC_PI_4, 0).unwrap();
        let inter = 2.0 * (math::sqrt(2.0) - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((rotated_iou_bev(&a, &b) - expected).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let b = BoxLabel::new(3.2, -1.7, 0.9, 4.5, 1.8, 1.6, -2.3, 1).unwrap();
        let center = (3.0, -2.0);
        let enc = encode_box(&b, center);
        let dec = decode_box(&enc, center, alloc::vec![0.5, 0.5]).unwrap();
        assert!((dec.cx - b.cx).abs() < 1e-9);
        assert!((dec.cy - b.cy).abs() < 1e-9);
        assert!((dec.cz - b.cz).abs() < 1e-9);
        assert!((dec.l - b.l).abs() < 1e-9);
        assert!((dec.w - b.w).abs() < 1e-9);
        assert!((dec.h - b.h).abs() < 1e-9);
        assert!((dec.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn zero_encoding_decodes_to_unit_box() {
        let dec = decode_box(&[0.0; 8], (2.5, 7.5), alloc::vec![0.1]).unwrap();
        assert_eq!(dec.cx, 2.5);
        assert_eq!(dec.cy, 7.5);
        assert_eq!(dec.cz, 0.0);
        assert_eq!(dec.l, 1.0);
        assert_eq!(dec.w, 1.0);
        assert_eq!(dec.h, 1.0);
        assert_eq!(dec.yaw, 0.0);
    }

    #[test]
    fn non_finite_encoding_rejected() {
        let mut enc = [0.0; 8];
        enc[3] = f64::NAN;
        assert!(decode_box(&enc, (0.0, 0.0), alloc::vec![0.0]).is_err());
    }

    #[test]
    fn label_validation_rejects_bad_boxes() {
        assert!(BoxLabel::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0).is_err());
        assert!(BoxLabel::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 4.0, 0).is_err());
        assert!(BoxLabel::new(f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0).is_err());
    }
}
