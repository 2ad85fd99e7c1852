//! Axis-aligned box algebra: IoU, GIoU and greedy score-ordered matching.
//!
//! Boxes are `(x, y, w, h)` with a top-left origin and half-open extent, so
//! `(0, 0, 10, 10)` and `(10, 0, 10, 10)` touch but do not overlap.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels (or grid units for the kernels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.w * self.h
        }
    }

    /// Zero or negative extent, or non-finite coordinates.
    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Longer side of the box.
    pub fn longer_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Overlap area with `other`.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.x2().max(other.x2()),
            self.y2().max(other.y2()),
        )
    }
}

/// Intersection over union. Degenerate boxes score 0 against everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b);
    let hull_area = hull.w.max(0.0) * hull.h.max(0.0);
    if hull_area <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull_area - union) / hull_area
}

/// IoU of every prediction against every ground truth, `[pred][gt]`.
pub fn iou_matrix(preds: &[BBox], gts: &[BBox]) -> Vec<Vec<f64>> {
    preds.iter().map(|p| gts.iter().map(|g| iou(p, g)).collect()).collect()
}

/// Outcome of [`greedy_match`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// For each prediction, the index of its matched ground truth.
    pub pred_to_gt: Vec<Option<usize>>,
    /// For each ground truth, the index of the prediction that claimed it.
    pub gt_to_pred: Vec<Option<usize>>,
}

impl Matching {
    pub fn matched_count(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching over an IoU matrix whose rows are already in descending
/// score order. Each row claims the unclaimed column with the highest IoU at
/// or above `iou_thresh`; equal IoUs go to the lower column index.
pub fn greedy_match_ious(ious: &[Vec<f64>], n_gts: usize, iou_thresh: f64) -> Matching {
    let mut pred_to_gt = vec![None; ious.len()];
    let mut gt_to_pred = vec![None; n_gts];
    for (p, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in row.iter().enumerate() {
            if gt_to_pred[g].is_some() || v < iou_thresh {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            pred_to_gt[p] = Some(g);
            gt_to_pred[g] = Some(p);
        }
    }
    Matching { pred_to_gt, gt_to_pred }
}

/// Greedy matching of score-sorted predictions against ground truths.
///
/// `predictions` must already be in descending score order (ties by ascending
/// index); the function does not reorder them.
pub fn greedy_match(predictions: &[BBox], gts: &[BBox], iou_thresh: f64) -> Matching {
    greedy_match_ious(&iou_matrix(predictions, gts), gts.len(), iou_thresh)
}
