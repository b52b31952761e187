//! Axis-aligned boxes, overlap measures, the distance-to-boundaries box
//! encoding and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::GeometryError;

/// A point in continuous scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle given by its top-left and bottom-right corners.
///
/// Serialized as the array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    /// Builds a box without validation.
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box, rejecting non-finite or inverted corners.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(GeometryError::InvalidBox(*self));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Larger of width and height; used for pyramid level assignment.
    pub fn max_extent(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// True when `p` lies in the closed box.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Reorders swapped corners so the box satisfies `x1 <= x2`, `y1 <= y2`.
    pub fn normalized(&self) -> BBox {
        BBox {
            x1: self.x1.min(self.x2),
            y1: self.y1.min(self.y2),
            x2: self.x1.max(self.x2),
            y2: self.y1.max(self.y2),
        }
    }
}

/// Nonnegative distances from an anchor point to the left, top, right and
/// bottom sides of a box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LtrbOffsets {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl LtrbOffsets {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.l >= 0.0 && self.t >= 0.0 && self.r >= 0.0 && self.b >= 0.0
    }
}

pub fn decode_ltrb(anchor: Point, offsets: &LtrbOffsets) -> BBox {
    BBox {
        x1: anchor.x - offsets.l,
        y1: anchor.y - offsets.t,
        x2: anchor.x + offsets.r,
        y2: anchor.y + offsets.b,
    }
}

/// Distances from `anchor` to the sides of `bbox`, or `None` when the anchor
/// lies outside the box.
pub fn encode_ltrb(anchor: Point, bbox: &BBox) -> Option<LtrbOffsets> {
    let off = raw_offsets(anchor, bbox);
    off.is_nonnegative().then_some(off)
}

/// Like [`encode_ltrb`] but clamps negative distances to zero, so the decoded
/// box is the target grown just enough to contain the anchor.
pub fn encode_ltrb_clamped(anchor: Point, bbox: &BBox) -> LtrbOffsets {
    let o = raw_offsets(anchor, bbox);
    LtrbOffsets::new(o.l.max(0.0), o.t.max(0.0), o.r.max(0.0), o.b.max(0.0))
}

fn raw_offsets(anchor: Point, bbox: &BBox) -> LtrbOffsets {
    LtrbOffsets::new(
        anchor.x - bbox.x1,
        anchor.y - bbox.y1,
        bbox.x2 - anchor.x,
        bbox.y2 - anchor.y,
    )
}

/// Intersection over union. Zero-area boxes have IoU 0 against anything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn enclosing_area(a: &BBox, b: &BBox) -> f64 {
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    cw.max(0.0) * ch.max(0.0)
}

/// Generalized IoU: `IoU - (|C| - |U|) / |C|` with `C` the smallest enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = enclosing_area(a, b);
    let overlap = if union > 0.0 { inter / union } else { 0.0 };
    if enclosing > 0.0 {
        overlap - (enclosing - union) / enclosing
    } else {
        overlap
    }
}

/// `1 - gIoU(pred, target)` and its gradient with respect to the predicted
/// corners `[x1, y1, x2, y2]`.
///
/// Where a `min`/`max` switches branch (touching or aligned edges) the
/// predicted box is taken as the active side, which is a valid subgradient.
pub fn giou_loss_boxes(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let wp = (pred.x2 - pred.x1).max(0.0);
    let hp = (pred.y2 - pred.y1).max(0.0);
    let area_p = wp * hp;
    let area_t = target.area();
    let mut d_area_p = [0.0; 4];
    if pred.x2 > pred.x1 && pred.y2 > pred.y1 {
        d_area_p = [-hp, -wp, hp, wp];
    }

    let ix1 = pred.x1.max(target.x1);
    let iy1 = pred.y1.max(target.y1);
    let ix2 = pred.x2.min(target.x2);
    let iy2 = pred.y2.min(target.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let (inter, d_inter) = if iw > 0.0 && ih > 0.0 {
        let mut d = [0.0; 4];
        if pred.x1 >= target.x1 {
            d[0] = -ih;
        }
        if pred.y1 >= target.y1 {
            d[1] = -iw;
        }
        if pred.x2 <= target.x2 {
            d[2] = ih;
        }
        if pred.y2 <= target.y2 {
            d[3] = iw;
        }
        (iw * ih, d)
    } else {
        (0.0, [0.0; 4])
    };

    let union = area_p + area_t - inter;
    let cw = pred.x2.max(target.x2) - pred.x1.min(target.x1);
    let ch = pred.y2.max(target.y2) - pred.y1.min(target.y1);
    let enclosing = cw.max(0.0) * ch.max(0.0);
    if union <= 0.0 || enclosing <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let mut d_enc = [0.0; 4];
    if pred.x1 <= target.x1 {
        d_enc[0] = -ch;
    }
    if pred.y1 <= target.y1 {
        d_enc[1] = -cw;
    }
    if pred.x2 >= target.x2 {
        d_enc[2] = ch;
    }
    if pred.y2 >= target.y2 {
        d_enc[3] = cw;
    }

    // loss = 2 - I/U - U/C
    let loss = 2.0 - inter / union - union / enclosing;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_p[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_cover = (d_union * enclosing - union * d_enc[k]) / (enclosing * enclosing);
        grad[k] = -d_iou - d_cover;
    }
    (loss, grad)
}

/// gIoU loss between two boxes expressed as distances from a shared anchor,
/// with the gradient with respect to the four predicted distances.
pub fn giou_loss(
    pred: &LtrbOffsets,
    target: &LtrbOffsets,
    anchor: Point,
) -> Result<(f64, [f64; 4]), GeometryError> {
    if !target.is_nonnegative() {
        return Err(GeometryError::AnchorOutsideTarget {
            anchor: (anchor.x, anchor.y),
        });
    }
    let (loss, g) = giou_loss_boxes(&decode_ltrb(anchor, pred), &decode_ltrb(anchor, target));
    // x1 = ax - l, y1 = ay - t, x2 = ax + r, y2 = ay + b
    Ok((loss, [-g[0], -g[1], g[2], g[3]]))
}

/// Orders indices by descending score, ties broken by lower index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. Returns kept input indices in descending
/// score order; a box is dropped when its IoU with an already kept box
/// exceeds `iou_threshold`.
pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    nms_limited(candidates, iou_threshold, usize::MAX)
}

/// [`nms`] stopped after `limit` boxes are kept; equal to a prefix of the
/// full result.
pub fn nms_limited(candidates: &[(BBox, f64)], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let order = descending_order(&scores);
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep.len() >= limit {
            break;
        }
        let bbox = &candidates[idx].0;
        let suppressed = keep.iter().any(|&k| {
            let other = &candidates[k].0;
            let disjoint = other.x2 <= bbox.x1 || bbox.x2 <= other.x1 || other.y2 <= bbox.y1 || bbox.y2 <= other.y1;
            let overlap = if disjoint { 0.0 } else { iou(other, bbox) };
            overlap > iou_threshold
        });
        if !suppressed {
            keep.push(idx);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rasterized overlap counting on a fine grid, independent of the
    /// closed form.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let x0 = a.x1.min(b.x1);
        let y0 = a.y1.min(b.y1);
        let x1 = a.x2.max(b.x2);
        let y1 = a.y2.max(b.y2);
        let (mut inter, mut uni) = (0u64, 0u64);
        let nx = ((x1 - x0) / res).round() as usize;
        let ny = ((y1 - y0) / res).round() as usize;
        for i in 0..nx {
            for j in 0..ny {
                let p = Point::new(x0 + (i as f64 + 0.5) * res, y0 + (j as f64 + 0.5) * res);
                let (ia, ib) = (a.contains(p), b.contains(p));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    uni += 1;
                }
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let oracle = raster_iou(&a, &b, 0.01);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn degenerate_iou_is_zero() {
        let p = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &BBox::new(0.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let expected = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou(&a, &b) - expected).abs() < 1e-12);
        // rasterized cross-check of the enclosing-box term: |C| = 9, |U| = 7
        let raster = raster_iou(&a, &b, 0.01) - (9.0 - 7.0) / 9.0;
        assert!((raster - expected).abs() < 1e-9);
        let (loss, _) = giou_loss_boxes(&a, &b);
        assert!((loss - 1.0793650793650793).abs() < 1e-12);

        let c = BBox::new(0.0, 0.0, 1.0, 1.0);
        let d = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert!((giou(&c, &d) + 7.0 / 9.0).abs() < 1e-12);
        let (loss, _) = giou_loss_boxes(&c, &d);
        assert!((loss - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_identity_has_zero_gradient_in_ltrb() {
        let anchor = Point::new(5.0, 5.0);
        let t = LtrbOffsets::new(1.0, 2.0, 3.0, 4.0);
        let (loss, g) = giou_loss(&t, &t, anchor).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn giou_loss_rejects_anchor_outside_target() {
        let bad = LtrbOffsets::new(-1.0, 1.0, 1.0, 1.0);
        assert!(giou_loss(&LtrbOffsets::default(), &bad, Point::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn decode_examples() {
        let a = Point::new(10.0, 10.0);
        assert_eq!(decode_ltrb(a, &LtrbOffsets::default()), BBox::new(10.0, 10.0, 10.0, 10.0));
        assert_eq!(
            decode_ltrb(a, &LtrbOffsets::new(2.0, 3.0, 4.0, 5.0)),
            BBox::new(8.0, 7.0, 14.0, 15.0)
        );
        assert!(encode_ltrb(Point::new(20.0, 0.0), &BBox::new(0.0, 0.0, 4.0, 4.0)).is_none());
        let c = encode_ltrb_clamped(Point::new(6.0, 2.0), &BBox::new(0.0, 0.0, 4.0, 4.0));
        assert_eq!(decode_ltrb(Point::new(6.0, 2.0), &c), BBox::new(0.0, 0.0, 6.0, 4.0));
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(nms(&[(a, 0.3)], 0.7), vec![0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.7), vec![1]);
        let b = BBox::new(0.0, 0.0, 2.0, 2.4);
        let c = BBox::new(5.0, 5.0, 6.0, 6.0);
        // IoU(A, B) = 4 / 4.8
        assert!((iou(&a, &b) - 4.0 / 4.8).abs() < 1e-12);
        assert_eq!(nms(&[(a, 0.9), (b, 0.8), (c, 0.7)], 0.7), vec![0, 2]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(nms(&[(a, 0.5), (a, 0.5), (a, 0.5)], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-10.0..10.0f64, -10.0..10.0f64, 0.1..8.0f64, 0.1..8.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn finite_diff(pred: &BBox, target: &BBox, k: usize, h: f64) -> f64 {
        let mut p = <[f64; 4]>::from(*pred);
        let mut m = p;
        p[k] += h;
        m[k] -= h;
        (giou_loss_boxes(&BBox::from(p), target).0 - giou_loss_boxes(&BBox::from(m), target).0)
            / (2.0 * h)
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn giou_range(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
            let (loss, _) = giou_loss_boxes(&a, &b);
            prop_assert!((0.0..=2.0).contains(&loss));
        }

        #[test]
        fn giou_equals_iou_for_nested_boxes(a in arb_box(), s in 0.05..0.95f64) {
            let inner = BBox::new(a.x1, a.y1, a.x1 + s * a.width(), a.y1 + s * a.height());
            prop_assert!((giou(&a, &inner) - iou(&a, &inner)).abs() < 1e-12);
        }

        #[test]
        fn giou_gradient_matches_finite_differences(pred in arb_box(), target in arb_box()) {
            let (_, g) = giou_loss_boxes(&pred, &target);
            for k in 0..4 {
                let num = finite_diff(&pred, &target, k, 1e-6);
                let denom = g[k].abs().max(num.abs()).max(1e-4);
                prop_assert!((g[k] - num).abs() / denom < 1e-5, "k={} analytic={} numeric={}", k, g[k], num);
            }
        }

        #[test]
        fn nms_matches_brute_force(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..12),
            thr in 0.0..1.0f64,
            limit in 0usize..14,
        ) {
            // repeatedly take the best remaining box and delete its overlaps
            let mut alive: Vec<usize> = (0..boxes.len()).collect();
            let mut expect = Vec::new();
            while !alive.is_empty() {
                let best = *alive
                    .iter()
                    .max_by(|&&a, &&b| boxes[a].1.partial_cmp(&boxes[b].1).unwrap().then(b.cmp(&a)))
                    .unwrap();
                expect.push(best);
                alive.retain(|&i| i != best && iou(&boxes[i].0, &boxes[best].0) <= thr);
            }
            prop_assert_eq!(nms(&boxes, thr), expect.clone());
            let cut: Vec<usize> = expect.into_iter().take(limit).collect();
            prop_assert_eq!(nms_limited(&boxes, thr, limit), cut);
        }

        #[test]
        fn encode_decode_round_trip(b in arb_box(), u in 0.01..0.99f64, v in 0.01..0.99f64) {
            let anchor = Point::new(b.x1 + u * b.width(), b.y1 + v * b.height());
            let off = encode_ltrb(anchor, &b).unwrap();
            let back = decode_ltrb(anchor, &off);
            for (x, y) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(b).iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
