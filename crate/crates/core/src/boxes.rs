//! Bounding-box geometry: the box type itself, IOU, anchor grids, the
//! center/log delta parameterization, greedy NMS, and anchor-to-ground-truth
//! assignment.
//!
//! Boxes are corner-encoded `(x1, y1, x2, y2)` in pixel coordinates with
//! strictly positive area. Regression deltas use box centers and log-space
//! extents, so they are scale invariant. All functions here are pure.

use std::fmt;

/// Magnitude bound applied to `tw`/`th` before exponentiation in
/// [`BoxDelta::decode`]; prevents overflow from an untrained head.
pub const DELTA_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum BoxError {
    /// Coordinates not finite or area not strictly positive.
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
}

impl fmt::Display for BoxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxError::Degenerate { x1, y1, x2, y2 } => write!(
                f,
                "degenerate box ({x1}, {y1}, {x2}, {y2}): requires finite coords, x2 > x1, y2 > y1"
            ),
        }
    }
}

impl std::error::Error for BoxError {}

/// Axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(BoxError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Construct from center and extents. `w` and `h` must be positive.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Clip to `[0, w] x [0, h]`; `None` if nothing with positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(w),
            self.y2.min(h),
        )
        .ok()
    }
}

/// Intersection over union of two boxes; 0 when disjoint, 1 when identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// The five biometric trait classes. A slap fingerprint image carries four
/// `Finger` boxes; every other class carries exactly one box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TraitClass {
    Face,
    Iris,
    Palm,
    Knuckle,
    Finger,
}

impl TraitClass {
    pub const ALL: [TraitClass; 5] = [
        TraitClass::Face,
        TraitClass::Iris,
        TraitClass::Palm,
        TraitClass::Knuckle,
        TraitClass::Finger,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TraitClass::Face => "face",
            TraitClass::Iris => "iris",
            TraitClass::Palm => "palm",
            TraitClass::Knuckle => "knuckle",
            TraitClass::Finger => "finger",
        }
    }

    pub fn from_name(s: &str) -> Option<TraitClass> {
        TraitClass::ALL.iter().copied().find(|t| t.name() == s)
    }

    /// Class index used by the detector heads (background is `ALL.len()`).
    pub fn index(&self) -> usize {
        TraitClass::ALL.iter().position(|t| t == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<TraitClass> {
        TraitClass::ALL.get(i).copied()
    }
}

impl fmt::Display for TraitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scored box. `label == None` means class-agnostic objectness (a region
/// proposal); `Some(trait)` is a final classified detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: Option<TraitClass>,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, label: Option<TraitClass>, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score));
        Detection { bbox, label, score }
    }
}

/// Dimensionless regression offsets between an anchor and a target box:
/// center shifts relative to the anchor extents and log-space size ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    /// Offsets that map `anchor` onto `gt`.
    pub fn encode(gt: &BBox, anchor: &BBox) -> BoxDelta {
        let (gx, gy) = gt.center();
        let (ax, ay) = anchor.center();
        BoxDelta {
            tx: (gx - ax) / anchor.width(),
            ty: (gy - ay) / anchor.height(),
            tw: (gt.width() / anchor.width()).ln(),
            th: (gt.height() / anchor.height()).ln(),
        }
    }

    /// Apply the offsets to `anchor`. `tw`/`th` are clamped to
    /// [`DELTA_CLAMP`] before exponentiation.
    pub fn decode(&self, anchor: &BBox) -> Result<BBox, BoxError> {
        let (ax, ay) = anchor.center();
        let cx = ax + self.tx * anchor.width();
        let cy = ay + self.ty * anchor.height();
        let w = anchor.width() * self.tw.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
        let h = anchor.height() * self.th.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
        BBox::from_center(cx, cy, w, h)
    }
}

/// Anchors tiled over a feature map: one per (cell, scale, ratio), centered
/// on the cell's image-space center. Ordering is row-major over cells, then
/// scale-major, then ratio, and never changes.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub fm_height: usize,
    pub fm_width: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors per cell (`K`).
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// Flat anchor index for (cell row, cell col, slot within cell).
    pub fn index(&self, cy: usize, cx: usize, slot: usize) -> usize {
        (cy * self.fm_width + cx) * self.per_cell() + slot
    }

    /// Inverse of [`AnchorGrid::index`].
    pub fn position(&self, anchor_index: usize) -> (usize, usize, usize) {
        let k = self.per_cell();
        let cell = anchor_index / k;
        (cell / self.fm_width, cell % self.fm_width, anchor_index % k)
    }
}

/// Tile anchors over an `fm_height x fm_width` feature map with the given
/// stride. For scale `s` and ratio `r` (height:width) the anchor is
/// `s/sqrt(r)` wide and `s*sqrt(r)` tall, so its area is `s^2`.
pub fn generate_anchors(
    fm_height: usize,
    fm_width: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid, BoxError> {
    assert!(fm_height > 0 && fm_width > 0 && stride > 0, "empty grid");
    assert!(
        !scales.is_empty() && !ratios.is_empty(),
        "scales and ratios must be non-empty"
    );
    assert!(
        scales.iter().all(|s| *s > 0.0) && ratios.iter().all(|r| *r > 0.0),
        "scales and ratios must be positive"
    );

    let mut shapes = Vec::with_capacity(scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let sq = r.sqrt();
            shapes.push((s / sq, s * sq));
        }
    }

    let mut anchors = Vec::with_capacity(fm_height * fm_width * shapes.len());
    for cy in 0..fm_height {
        for cx in 0..fm_width {
            let px = (cx as f64 + 0.5) * stride as f64;
            let py = (cy as f64 + 0.5) * stride as f64;
            for &(w, h) in &shapes {
                anchors.push(BBox::from_center(px, py, w, h)?);
            }
        }
    }

    Ok(AnchorGrid {
        fm_height,
        fm_width,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        anchors,
    })
}

/// Greedy non-maximum suppression. Repeatedly keeps the highest-score
/// remaining detection and discards the rest whose IOU with it exceeds
/// `iou_threshold`. Ties are broken by input order, so the result is
/// deterministic. Output is sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "nms threshold must be in (0, 1]"
    );
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());

    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order {
            if !suppressed[j] && j != i && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
        suppressed[i] = true;
    }
    kept
}

/// Per-anchor training label produced by [`assign_anchors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    /// Overlaps a ground truth; carries the gt index and the encoded target.
    Positive { gt: usize, target: BoxDelta },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// Label every anchor against the ground-truth boxes.
///
/// - an anchor whose best IOU is `>= pos_threshold` is positive for its
///   argmax gt;
/// - every gt additionally claims its own argmax-IOU anchor, even below the
///   threshold, so each gt is covered by at least one positive;
/// - anchors with best IOU `< neg_threshold` are negative, the rest ignored.
///
/// An empty gt list makes every anchor negative.
pub fn assign_anchors(
    grid: &AnchorGrid,
    gts: &[BBox],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Vec<AnchorLabel> {
    assert!(
        pos_threshold > neg_threshold,
        "pos_threshold must exceed neg_threshold"
    );
    let anchors = grid.anchors();
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }

    // IOU of every anchor against every gt. Scenes are tiny (<= a few
    // thousand anchors, a handful of gts), so the dense matrix is fine.
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();

    let mut labels: Vec<AnchorLabel> = overlaps
        .iter()
        .enumerate()
        .map(|(ai, row)| {
            let (best_gt, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (gi, &v)| if v > acc.1 { (gi, v) } else { acc });
            if best >= pos_threshold {
                AnchorLabel::Positive {
                    gt: best_gt,
                    target: BoxDelta::encode(&gts[best_gt], &anchors[ai]),
                }
            } else if best < neg_threshold {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    // Coverage guarantee: each gt forces its argmax anchor positive. If two
    // gts share an argmax anchor, the later one falls back to its best
    // still-unclaimed anchor.
    let mut claimed = vec![false; anchors.len()];
    for (gi, _) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ai, row) in overlaps.iter().enumerate() {
            if claimed[ai] {
                continue;
            }
            if best.map_or(true, |(_, b)| row[gi] > b) {
                best = Some((ai, row[gi]));
            }
        }
        if let Some((ai, _)) = best {
            claimed[ai] = true;
            labels[ai] = AnchorLabel::Positive {
                gt: gi,
                target: BoxDelta::encode(&gts[gi], &anchors[ai]),
            };
        }
    }

    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Count unit grid cells inside a box / its intersection with another.
    /// Exact for integer-aligned boxes; the independent IOU oracle.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let lo_x = a.x1().min(b.x1()) as i64;
        let hi_x = a.x2().max(b.x2()).ceil() as i64;
        let lo_y = a.y1().min(b.y1()) as i64;
        let hi_y = a.y2().max(b.y2()).ceil() as i64;
        let mut inter = 0u64;
        let mut union = 0u64;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let cx = x as f64 + 0.5;
                let cy = y as f64 + 0.5;
                let in_a = cx > a.x1() && cx < a.x2() && cy > a.y1() && cy < a.y2();
                let in_b = cx > b.x1() && cx < b.x2() && cy > b.y1() && cy < b.y2();
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Independent O(n^2) greedy NMS used to cross-check the real one.
    fn nms_reference(dets: &[Detection], threshold: f64) -> Vec<Detection> {
        let mut remaining: Vec<usize> = (0..dets.len()).collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = remaining[0];
            for &i in &remaining {
                if dets[i].score > dets[best].score {
                    best = i;
                }
            }
            kept.push(dets[best].clone());
            remaining.retain(|&i| i != best && iou(&dets[best].bbox, &dets[i].bbox) <= threshold);
        }
        kept
    }

    fn random_box(rng: &mut Rng, extent: f64) -> BBox {
        // Sizes span a 16x ratio, well inside the decode clamp of e^±4.
        let w = rng.range(4.0, 64.0);
        let h = rng.range(4.0, 64.0);
        let x1 = rng.range(0.0, extent - w);
        let y1 = rng.range(0.0, extent - h);
        bb(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn box_construction_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(5.0, 0.0, 4.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(3.0, 4.0, 10.0, 20.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bb(100.0, 100.0, 110.0, 110.0);
        assert_eq!(iou(&a, &far), 0.0);
        // Touching edges count as disjoint.
        let touch = bb(10.0, 4.0, 15.0, 20.0);
        assert_eq!(iou(&a, &touch), 0.0);
    }

    #[test]
    fn iou_half_overlap_case() {
        // intersection 50, union 150.
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((raster_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_rasterization_on_integer_boxes() {
        let mut rng = Rng::new(11);
        for _ in 0..500 {
            let a = bb(
                rng.below(40) as f64,
                rng.below(40) as f64,
                41.0 + rng.below(20) as f64,
                41.0 + rng.below(20) as f64,
            );
            let b = bb(
                rng.below(40) as f64,
                rng.below(40) as f64,
                41.0 + rng.below(20) as f64,
                41.0 + rng.below(20) as f64,
            );
            let analytic = iou(&a, &b);
            let raster = raster_iou(&a, &b);
            let tol = 2.0 / a.area().min(b.area());
            assert!(
                (analytic - raster).abs() <= tol,
                "iou {analytic} vs raster {raster}"
            );
            // Symmetry.
            assert_eq!(analytic, iou(&b, &a));
        }
    }

    #[test]
    fn iou_monotone_under_shrinking_intersection() {
        let a = bb(0.0, 0.0, 20.0, 20.0);
        let mut prev = 1.0;
        for step in 0..30 {
            let dx = step as f64;
            let b = bb(dx, 0.0, dx + 20.0, 20.0);
            let v = iou(&a, &b);
            assert!(v <= prev + 1e-15, "iou rose while sliding apart");
            prev = v;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn anchor_grid_counts() {
        let scales = [16.0, 32.0, 64.0];
        let ratios = [0.5, 1.0, 2.0];
        let g = generate_anchors(1, 1, 8, &scales, &ratios).unwrap();
        assert_eq!(g.len(), 9);
        let g = generate_anchors(4, 5, 8, &scales, &ratios).unwrap();
        assert_eq!(g.len(), 180);
        assert_eq!(g.per_cell(), 9);
    }

    #[test]
    fn anchor_shape_and_area() {
        let g = generate_anchors(1, 1, 16, &[32.0], &[2.0]).unwrap();
        let a = &g.anchors()[0];
        assert!((a.width() - 32.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((a.height() - 32.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((a.area() - 1024.0).abs() < 1e-9);
        // Centered on the single cell's image-space center.
        assert_eq!(a.center(), (8.0, 8.0));
    }

    #[test]
    fn anchor_area_preserved_for_all_configured_shapes() {
        let scales = [16.0, 32.0, 64.0];
        let ratios = [0.5, 1.0, 2.0];
        let g = generate_anchors(2, 2, 8, &scales, &ratios).unwrap();
        for (i, a) in g.anchors().iter().enumerate() {
            let (_, _, slot) = g.position(i);
            let s = scales[slot / ratios.len()];
            assert!((a.area() - s * s).abs() < 1e-9, "area {} for s {}", a.area(), s);
        }
    }

    #[test]
    fn anchor_ordering_is_cell_major_then_scale_then_ratio() {
        let g = generate_anchors(2, 3, 8, &[16.0, 32.0], &[1.0, 2.0]).unwrap();
        // Index round-trips.
        for i in 0..g.len() {
            let (cy, cx, slot) = g.position(i);
            assert_eq!(g.index(cy, cx, slot), i);
        }
        // Slot 0 of cell (1, 2) is centered at ((2+0.5)*8, (1+0.5)*8).
        let a = &g.anchors()[g.index(1, 2, 0)];
        assert_eq!(a.center(), (20.0, 12.0));
        // Slots enumerate scale-major: slots 0,1 are scale 16, slots 2,3 scale 32.
        let s0 = &g.anchors()[g.index(0, 0, 0)];
        let s2 = &g.anchors()[g.index(0, 0, 2)];
        assert!((s0.area() - 256.0).abs() < 1e-9);
        assert!((s2.area() - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = bb(10.0, 20.0, 42.0, 52.0);
        assert_eq!(BoxDelta::encode(&a, &a), BoxDelta::ZERO);
    }

    #[test]
    fn encode_known_offsets() {
        let anchor = bb(0.0, 0.0, 10.0, 10.0);
        let gt = bb(5.0, 5.0, 15.0, 15.0);
        let d = BoxDelta::encode(&gt, &anchor);
        assert!((d.tx - 0.5).abs() < 1e-12);
        assert!((d.ty - 0.5).abs() < 1e-12);
        assert_eq!(d.tw, 0.0);
        assert_eq!(d.th, 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let gt = random_box(&mut rng, 96.0);
            let anchor = random_box(&mut rng, 96.0);
            let back = BoxDelta::encode(&gt, &anchor).decode(&anchor).unwrap();
            for (a, b) in [
                (gt.x1(), back.x1()),
                (gt.y1(), back.y1()),
                (gt.x2(), back.x2()),
                (gt.y2(), back.y2()),
            ] {
                assert!((a - b).abs() < 1e-9, "round trip {a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_clamps_extreme_deltas() {
        let anchor = bb(0.0, 0.0, 10.0, 10.0);
        let d = BoxDelta {
            tx: 0.0,
            ty: 0.0,
            tw: 50.0,
            th: -50.0,
        };
        let out = d.decode(&anchor).unwrap();
        assert!((out.width() - 10.0 * DELTA_CLAMP.exp()).abs() < 1e-9);
        assert!((out.height() - 10.0 * (-DELTA_CLAMP).exp()).abs() < 1e-12);
    }

    #[test]
    fn nms_single_detection_kept() {
        let d = Detection::new(bb(0.0, 0.0, 5.0, 5.0), None, 0.4);
        assert_eq!(nms(&[d.clone()], 0.5), vec![d]);
    }

    #[test]
    fn nms_suppresses_high_overlap_pair() {
        let hi = Detection::new(bb(0.0, 0.0, 10.0, 10.0), None, 0.9);
        let lo = Detection::new(bb(1.0, 1.0, 11.0, 11.0), None, 0.8);
        // Pairwise IOU 81/119, above 0.5.
        assert!((iou(&hi.bbox, &lo.bbox) - 81.0 / 119.0).abs() < 1e-12);
        let kept = nms(&[lo, hi.clone()], 0.5);
        assert_eq!(kept, vec![hi]);
    }

    #[test]
    fn nms_matches_reference_on_random_scenes() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..200)
                .map(|_| Detection::new(random_box(&mut rng, 64.0), None, rng.uniform()))
                .collect();
            let out = nms(&dets, 0.4);
            let expect = nms_reference(&dets, 0.4);
            assert_eq!(out, expect);
            // Kept boxes overlap at most the threshold.
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    assert!(iou(&out[i].bbox, &out[j].bbox) <= 0.4);
                }
            }
        }
    }

    #[test]
    fn assign_threshold_positive() {
        let g = generate_anchors(4, 4, 8, &[16.0], &[1.0]).unwrap();
        // A gt sitting exactly on an anchor scores IOU 1 >= 0.7.
        let gt = *&g.anchors()[5];
        let labels = assign_anchors(&g, &[gt], 0.7, 0.3);
        assert!(labels[5].is_positive());
        match labels[5] {
            AnchorLabel::Positive { gt: gi, target } => {
                assert_eq!(gi, 0);
                assert_eq!(target, BoxDelta::ZERO);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn assign_forces_low_iou_best_anchor_positive() {
        let g = generate_anchors(4, 4, 8, &[16.0], &[1.0]).unwrap();
        // Small gt: best IOU well below 0.7 but its argmax anchor still turns
        // positive.
        let gt = bb(9.0, 9.0, 16.0, 16.0);
        let labels = assign_anchors(&g, &[gt], 0.7, 0.3);
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
        assert_eq!(positives.len(), 1);
        let best = (0..g.len())
            .max_by(|&a, &b| {
                iou(&g.anchors()[a], &gt)
                    .partial_cmp(&iou(&g.anchors()[b], &gt))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(positives[0], best);
        assert!(iou(&g.anchors()[best], &gt) < 0.7);
    }

    #[test]
    fn assign_empty_gts_all_negative() {
        let g = generate_anchors(3, 3, 8, &[16.0], &[1.0]).unwrap();
        let labels = assign_anchors(&g, &[], 0.7, 0.3);
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn assign_covers_every_gt_on_random_scenes() {
        let mut rng = Rng::new(23);
        let g = generate_anchors(12, 12, 8, &[16.0, 32.0, 64.0], &[0.5, 1.0, 2.0]).unwrap();
        for _ in 0..200 {
            let n_gt = 1 + rng.below(4);
            let mut gts: Vec<BBox> = Vec::new();
            while gts.len() < n_gt {
                let w = rng.range(10.0, 50.0);
                let h = rng.range(10.0, 50.0);
                let x1 = rng.range(0.0, 96.0 - w);
                let y1 = rng.range(0.0, 96.0 - h);
                let cand = bb(x1, y1, x1 + w, y1 + h);
                if gts.iter().all(|g| iou(g, &cand) < 0.1) {
                    gts.push(cand);
                }
            }
            let labels = assign_anchors(&g, &gts, 0.7, 0.3);
            // Exhaustive scan: every gt index appears among the positives.
            let mut covered = vec![false; gts.len()];
            for l in &labels {
                if let AnchorLabel::Positive { gt, .. } = l {
                    covered[*gt] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "uncovered gt in {gts:?}");
        }
    }
}
