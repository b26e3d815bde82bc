//! Box arithmetic shared by proposal generation, target assignment, and
//! evaluation: IoU, anchor shapes and tiling, center/log-size delta coding,
//! greedy NMS, clipping.
//!
//! Coordinates are continuous corner form (x1, y1, x2, y2); area is exact
//! width * height with no +1 offset.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in image pixel coordinates, x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {self:?}")));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Validation(format!(
                "degenerate box {self:?}: width and height must be positive"
            )));
        }
        Ok(())
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
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Overlap area with another box; 0 when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamp to a [0,w]x[0,h] window. Returns None when nothing positive remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let b = BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }
}

/// Intersection over union of two valid boxes, in [0,1].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// IoU without validation, for hot loops over boxes already known valid.
#[inline]
pub fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    inter / (a.area() + b.area() - inter)
}

/// Anchor layout: one base size per pyramid level, the full ratio list at
/// every level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorGrid {
    /// height/width ratios applied at every level.
    pub ratios: Vec<f64>,
    /// base size in pixels per pyramid level; len(sizes) == number of levels.
    pub sizes: Vec<f64>,
    /// feature stride per pyramid level.
    pub strides: Vec<usize>,
}

impl AnchorGrid {
    pub fn new(ratios: Vec<f64>, sizes: Vec<f64>, strides: Vec<usize>) -> Result<Self> {
        if ratios.is_empty() || sizes.is_empty() {
            return Err(Error::Config("anchor ratios and sizes must be non-empty".into()));
        }
        if sizes.len() != strides.len() {
            return Err(Error::Config(format!(
                "one anchor size per level: {} sizes vs {} strides",
                sizes.len(),
                strides.len()
            )));
        }
        if ratios.iter().any(|r| *r <= 0.0) || sizes.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("anchor ratios and sizes must be positive".into()));
        }
        Ok(AnchorGrid { ratios, sizes, strides })
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len()
    }
}

/// Anchor shapes for one base size: each shape has area size^2 and
/// height/width equal to the requested ratio.
pub fn make_anchor_shapes(size: f64, ratios: &[f64]) -> Result<Vec<(f64, f64)>> {
    if size <= 0.0 {
        return Err(Error::Validation(format!("anchor size must be positive, got {size}")));
    }
    ratios
        .iter()
        .map(|&r| {
            if r <= 0.0 {
                return Err(Error::Validation(format!("anchor ratio must be positive, got {r}")));
            }
            let w = size / r.sqrt();
            let h = size * r.sqrt();
            Ok((w, h))
        })
        .collect()
}

/// Tile anchors over per-level feature maps, centered on the stride grid.
///
/// Ordering is (level, row, col, ratio) and fully deterministic; callers rely
/// on it to line up anchors with flattened network outputs.
pub fn tile_anchors(grid: &AnchorGrid, feature_dims: &[(usize, usize)]) -> Result<Vec<BoundingBox>> {
    if feature_dims.len() != grid.levels() {
        return Err(Error::Config(format!(
            "feature dims for {} levels, grid has {}",
            feature_dims.len(),
            grid.levels()
        )));
    }
    let mut anchors = Vec::new();
    for (level, &(h, w)) in feature_dims.iter().enumerate() {
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!("feature map at level {level} has zero dim")));
        }
        let stride = grid.strides[level] as f64;
        let shapes = make_anchor_shapes(grid.sizes[level], &grid.ratios)?;
        anchors.reserve(h * w * shapes.len());
        for row in 0..h {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..w {
                let cx = (col as f64 + 0.5) * stride;
                for &(aw, ah) in &shapes {
                    anchors.push(BoundingBox {
                        x1: cx - aw * 0.5,
                        y1: cy - ah * 0.5,
                        x2: cx + aw * 0.5,
                        y2: cy + ah * 0.5,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Center/log-size deltas taking `anchor` onto `target`.
pub fn encode_deltas(anchor: &BoundingBox, target: &BoundingBox) -> Result<[f64; 4]> {
    anchor.validate()?;
    target.validate()?;
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok([
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`encode_deltas`]; clips to a (width, height) window when given.
pub fn decode_deltas(
    anchor: &BoundingBox,
    deltas: &[f64; 4],
    clip_to: Option<(f64, f64)>,
) -> Result<BoundingBox> {
    anchor.validate()?;
    let (acx, acy) = anchor.center();
    // Cap log-size terms so garbage network output cannot overflow to inf.
    let dw = deltas[2].min(8.0);
    let dh = deltas[3].min(8.0);
    let cx = acx + deltas[0] * anchor.width();
    let cy = acy + deltas[1] * anchor.height();
    let w = anchor.width() * dw.exp();
    let h = anchor.height() * dh.exp();
    let b = BoundingBox {
        x1: cx - w * 0.5,
        y1: cy - h * 0.5,
        x2: cx + w * 0.5,
        y2: cy + h * 0.5,
    };
    match clip_to {
        Some((iw, ih)) => b
            .clip(iw, ih)
            .ok_or_else(|| Error::Validation("decoded box fully outside clip window".into())),
        None => Ok(b),
    }
}

/// Greedy NMS over (box, score) pairs.
///
/// Returns indices of kept boxes ordered by descending score; equal scores
/// break toward the lower original index. A box is suppressed when its IoU
/// with any earlier-kept box reaches `iou_threshold`.
pub fn nms(boxes: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|(_, s)| *s).collect();
    let order = crate::util::argsort_desc(&scores);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| iou_unchecked(&boxes[k].0, &boxes[i].0) >= iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity_disjoint_partial() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = bx(5.0, 0.0, 15.0, 10.0);
        let v = iou(&a, &c).unwrap();
        assert!((v - 50.0 / 150.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let bad = BoundingBox { x1: 5.0, y1: 5.0, x2: 5.0, y2: 9.0 };
        assert!(iou(&a, &bad).is_err());
    }

    /// Rasterization oracle: count cells (center-in test) on a fine grid over
    /// the union bbox. Agreement tolerance is two boundary rows of cells.
    fn iou_rasterized(a: &BoundingBox, b: &BoundingBox, cells: usize) -> (f64, f64) {
        let x0 = a.x1.min(b.x1);
        let y0 = a.y1.min(b.y1);
        let x1 = a.x2.max(b.x2);
        let y1 = a.y2.max(b.y2);
        let dx = (x1 - x0) / cells as f64;
        let dy = (y1 - y0) / cells as f64;
        let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
        for iy in 0..cells {
            let cy = y0 + (iy as f64 + 0.5) * dy;
            for ix in 0..cells {
                let cx = x0 + (ix as f64 + 0.5) * dx;
                let in_a = cx >= a.x1 && cx < a.x2 && cy >= a.y1 && cy < a.y2;
                let in_b = cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2;
                na += in_a as u64;
                nb += in_b as u64;
                nab += (in_a && in_b) as u64;
            }
        }
        let raster = nab as f64 / (na + nb - nab) as f64;
        let min_side = a.width().min(a.height()).min(b.width()).min(b.height());
        let cell = dx.max(dy);
        (raster, 2.0 * cell / min_side)
    }

    #[test]
    fn iou_matches_rasterization_oracle() {
        let mut rng = crate::util::rng_from(42, &[0]);
        for _ in 0..1000 {
            let mut sample = || {
                let x1: f64 = rng.random_range(0.0..80.0);
                let y1: f64 = rng.random_range(0.0..80.0);
                let w: f64 = rng.random_range(20.0..80.0);
                let h: f64 = rng.random_range(20.0..80.0);
                bx(x1, y1, x1 + w, y1 + h)
            };
            let a = sample();
            let b = sample();
            let exact = iou(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&exact));
            assert_eq!(exact, iou(&b, &a).unwrap());
            let (raster, tol) = iou_rasterized(&a, &b, 400);
            assert!(
                (exact - raster).abs() <= tol,
                "iou {exact} vs raster {raster}, tol {tol}"
            );
        }
    }

    #[test]
    fn anchor_shapes_preserve_area_and_ratio() {
        let shapes = make_anchor_shapes(32.0, &[0.25, 0.5, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(shapes.len(), 5);
        for &(w, h) in &shapes {
            assert!((w * h - 1024.0).abs() <= 1e-6 * 1024.0);
        }
        assert_eq!(shapes[2], (32.0, 32.0));
        let (w, h) = shapes[4];
        assert!((w - 16.0).abs() < 1e-9 && (h - 64.0).abs() < 1e-9);
        assert!(make_anchor_shapes(-1.0, &[1.0]).is_err());
        assert!(make_anchor_shapes(32.0, &[0.0]).is_err());
    }

    #[test]
    fn tile_counts_match_enumeration() {
        let ratios = vec![0.25, 0.5, 1.0, 2.0, 4.0];
        let g1 = AnchorGrid::new(ratios.clone(), vec![32.0], vec![8]).unwrap();
        assert_eq!(tile_anchors(&g1, &[(1, 1)]).unwrap().len(), 5);
        assert_eq!(tile_anchors(&g1, &[(2, 3)]).unwrap().len(), 30);
        let g2 = AnchorGrid::new(ratios, vec![32.0, 64.0], vec![8, 16]).unwrap();
        let dims = [(4, 4), (2, 2)];
        let expected: usize = dims.iter().map(|(h, w)| h * w * 5).sum();
        assert_eq!(expected, 100);
        assert_eq!(tile_anchors(&g2, &dims).unwrap().len(), expected);
    }

    #[test]
    fn tile_anchor_centers_on_stride_grid() {
        let g = AnchorGrid::new(vec![1.0], vec![16.0], vec![8]).unwrap();
        let anchors = tile_anchors(&g, &[(2, 2)]).unwrap();
        let centers: Vec<(f64, f64)> = anchors.iter().map(|a| a.center()).collect();
        assert_eq!(centers, vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
    }

    #[test]
    fn delta_identity_and_shift() {
        let a = bx(10.0, 10.0, 30.0, 50.0);
        assert_eq!(encode_deltas(&a, &a).unwrap(), [0.0, 0.0, 0.0, 0.0]);
        let shifted = bx(15.0, 10.0, 35.0, 50.0);
        let d = encode_deltas(&a, &shifted).unwrap();
        assert!((d[0] - 5.0 / 20.0).abs() < 1e-12);
        assert_eq!(&d[1..], &[0.0, 0.0, 0.0]);
        let back = decode_deltas(&a, &[0.0, 0.0, 0.0, 0.0], None).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn decode_clips_to_window() {
        let a = bx(700.0, 700.0, 820.0, 790.0);
        let b = decode_deltas(&a, &[0.5, 0.5, 0.0, 0.0], Some((800.0, 800.0))).unwrap();
        assert!(b.x2 <= 800.0 && b.y2 <= 800.0 && b.x1 >= 0.0 && b.y1 >= 0.0);
    }

    #[test]
    fn nms_duplicate_suppression() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.7)], 0.5), vec![0]);
        let kept = nms(&[(a, 0.9), (a, 0.8)], 0.5);
        assert_eq!(kept, vec![0]);
        let kept = nms(&[(a, 0.8), (a, 0.9)], 0.5);
        assert_eq!(kept, vec![1]);
    }

    /// Independent greedy enumeration used as the NMS oracle.
    fn nms_oracle(boxes: &[(BoundingBox, f64)], thr: f64) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..boxes.len()).collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            // pick best score, lowest index on ties
            let mut best = remaining[0];
            for &i in &remaining {
                if boxes[i].1 > boxes[best].1 {
                    best = i;
                }
            }
            kept.push(best);
            remaining.retain(|&i| {
                i != best && iou_unchecked(&boxes[i].0, &boxes[best].0) < thr
            });
        }
        kept
    }

    #[test]
    fn nms_matches_greedy_oracle_on_fixture() {
        let boxes = vec![
            (bx(0.0, 0.0, 10.0, 10.0), 0.9),
            (bx(1.0, 1.0, 11.0, 11.0), 0.85),
            (bx(20.0, 20.0, 30.0, 30.0), 0.8),
            (bx(2.0, 2.0, 12.0, 12.0), 0.7),
            (bx(21.0, 21.0, 31.0, 31.0), 0.6),
        ];
        assert_eq!(nms(&boxes, 0.5), nms_oracle(&boxes, 0.5));
    }

    #[test]
    fn nms_randomized_postconditions() {
        let mut rng = crate::util::rng_from(7, &[1]);
        for case in 0..1000u64 {
            let n = rng.random_range(1..12);
            let boxes: Vec<(BoundingBox, f64)> = (0..n)
                .map(|_| {
                    let x1: f64 = rng.random_range(0.0..50.0);
                    let y1: f64 = rng.random_range(0.0..50.0);
                    let b = bx(x1, y1, x1 + rng.random_range(5.0..30.0), y1 + rng.random_range(5.0..30.0));
                    (b, rng.random_range(0.0..1.0))
                })
                .collect();
            let thr = 0.5;
            let kept = nms(&boxes, thr);
            assert_eq!(kept, nms_oracle(&boxes, thr), "case {case}");
            // kept set pairwise IoU strictly below threshold
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    assert!(iou_unchecked(&boxes[a].0, &boxes[b].0) < thr);
                }
            }
            // every suppressed box overlaps an earlier-kept one at >= thr
            for i in 0..boxes.len() {
                if !kept.contains(&i) {
                    assert!(kept
                        .iter()
                        .any(|&k| boxes[k].1 >= boxes[i].1
                            && iou_unchecked(&boxes[k].0, &boxes[i].0) >= thr));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            ax in 0.0..500.0f64, ay in 0.0..500.0f64,
            aw in 1.0..300.0f64, ah in 1.0..300.0f64,
            tx in 0.0..500.0f64, ty in 0.0..500.0f64,
            tw in 1.0..300.0f64, th in 1.0..300.0f64,
        ) {
            let anchor = bx(ax, ay, ax + aw, ay + ah);
            let target = bx(tx, ty, tx + tw, ty + th);
            let d = encode_deltas(&anchor, &target).unwrap();
            let back = decode_deltas(&anchor, &d, None).unwrap();
            let scale = target.width().max(target.height()).max(1.0);
            prop_assert!((back.x1 - target.x1).abs() <= 1e-6 * scale);
            prop_assert!((back.y1 - target.y1).abs() <= 1e-6 * scale);
            prop_assert!((back.x2 - target.x2).abs() <= 1e-6 * scale);
            prop_assert!((back.y2 - target.y2).abs() <= 1e-6 * scale);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..100.0f64, ay in 0.0..100.0f64,
            aw in 0.5..80.0f64, ah in 0.5..80.0f64,
            bx_ in 0.0..100.0f64, by in 0.0..100.0f64,
            bw in 0.5..80.0f64, bh in 0.5..80.0f64,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx_, by, bx_ + bw, by + bh);
            let v = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }
}
