//! Training losses of the detection head with IoU-based label assignment.
//!
//! Positive and index images carry a ground-truth box: the loss is an L1 +
//! GIoU localization term plus binary cross-entropy on the confidence. The BCE
//! label is positive above `iou_pos`, negative below `iou_neg`, and the BCE
//! term is dropped in between. Negative images only get BCE against label 0.
//! Each role's total is scaled by that role's weight.

use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::geometry::{giou, iou, BBox};

/// Confidences are clamped to `[EPS, 1 - EPS]` inside the BCE.
const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub positive_weight: f64,
    pub index_weight: f64,
    pub negative_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            iou_pos: 0.7,
            iou_neg: 0.3,
            positive_weight: 1.0,
            index_weight: 1.0,
            negative_weight: 1.0,
            l1_weight: 1.0,
            giou_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        let weights = [
            self.positive_weight,
            self.index_weight,
            self.negative_weight,
            self.l1_weight,
            self.giou_weight,
        ];
        if !(0.0 <= self.iou_neg && self.iou_neg < self.iou_pos && self.iou_pos <= 1.0) {
            return Err(KernelError::Config(format!(
                "need 0 <= iou_neg < iou_pos <= 1, got ({}, {})",
                self.iou_neg, self.iou_pos
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(KernelError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn role_weight(&self, role: ImageRole) -> f64 {
        match role {
            ImageRole::Positive => self.positive_weight,
            ImageRole::Index => self.index_weight,
            ImageRole::Negative => self.negative_weight,
        }
    }

    /// BCE label for a prediction with the given IoU, `None` when ignored.
    pub fn assign(&self, iou: f64) -> Option<BceLabel> {
        if iou > self.iou_pos {
            Some(BceLabel::Positive)
        } else if iou < self.iou_neg {
            Some(BceLabel::Negative)
        } else {
            None
        }
    }
}

/// Which training image a loss is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRole {
    /// The target in a different capture.
    Positive,
    /// The reference image the target was registered from.
    Index,
    /// An image without the target.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BceLabel {
    Positive,
    Negative,
}

impl BceLabel {
    pub fn target(&self) -> f64 {
        match self {
            BceLabel::Positive => 1.0,
            BceLabel::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// IoU of the prediction with the ground truth (0 for negative images).
    pub iou: f64,
    pub label: Option<BceLabel>,
    /// `l1_weight * L1 + giou_weight * (1 - GIoU)`, before the role weight.
    pub localization: f64,
    pub bce: Option<f64>,
    /// Role-weighted sum of all present terms.
    pub total: f64,
}

fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn bce_grad(p: f64, target: f64) -> f64 {
    if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
        return 0.0;
    }
    -target / p + (1.0 - target) / (1.0 - p)
}

fn l1(a: &BBox, b: &BBox) -> f64 {
    (a.x - b.x).abs() + (a.y - b.y).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

fn check_inputs(
    pred: &BBox,
    confidence: f64,
    gt: Option<&BBox>,
    cfg: &LossConfig,
    role: ImageRole,
) -> Result<(), KernelError> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(KernelError::Config(format!("confidence {confidence} outside [0, 1]")));
    }
    if !pred.is_finite() {
        return Err(KernelError::NonFinite("predicted box"));
    }
    match (role, gt) {
        (ImageRole::Negative, Some(_)) => Err(KernelError::Role("negative images have no ground-truth box")),
        (ImageRole::Positive | ImageRole::Index, None) => {
            Err(KernelError::Role("positive and index images need a ground-truth box"))
        }
        _ => Ok(()),
    }
}

/// Loss of one predicted box (with its confidence) on one training image.
pub fn detection_loss(
    pred: &BBox,
    confidence: f64,
    gt: Option<&BBox>,
    cfg: &LossConfig,
    role: ImageRole,
) -> Result<LossBreakdown, KernelError> {
    check_inputs(pred, confidence, gt, cfg, role)?;
    let weight = cfg.role_weight(role);
    let Some(gt) = gt else {
        let b = bce(confidence, 0.0);
        return Ok(LossBreakdown {
            iou: 0.0,
            label: Some(BceLabel::Negative),
            localization: 0.0,
            bce: Some(b),
            total: weight * b,
        });
    };
    let overlap = iou(pred, gt);
    let localization = cfg.l1_weight * l1(pred, gt) + cfg.giou_weight * (1.0 - giou(pred, gt));
    let label = cfg.assign(overlap);
    let bce_term = label.map(|l| bce(confidence, l.target()));
    Ok(LossBreakdown {
        iou: overlap,
        label,
        localization,
        bce: bce_term,
        total: weight * (localization + bce_term.unwrap_or(0.0)),
    })
}

/// Gradient of the total loss with respect to `[x, y, w, h]` of the predicted
/// box and the confidence. Label assignment is treated as locally constant.
pub fn detection_loss_grad(
    pred: &BBox,
    confidence: f64,
    gt: Option<&BBox>,
    cfg: &LossConfig,
    role: ImageRole,
) -> Result<([f64; 4], f64), KernelError> {
    check_inputs(pred, confidence, gt, cfg, role)?;
    let weight = cfg.role_weight(role);
    let Some(gt) = gt else {
        return Ok(([0.0; 4], weight * bce_grad(confidence, 0.0)));
    };
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let d_l1 = [
        sign(pred.x - gt.x),
        sign(pred.y - gt.y),
        sign(pred.w - gt.w),
        sign(pred.h - gt.h),
    ];
    let d_giou = giou_grad(pred, gt);
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = weight * (cfg.l1_weight * d_l1[k] - cfg.giou_weight * d_giou[k]);
    }
    let d_conf = match cfg.assign(iou(pred, gt)) {
        Some(l) => weight * bce_grad(confidence, l.target()),
        None => 0.0,
    };
    Ok((grad, d_conf))
}

/// Gradient of GIoU with respect to `[x, y, w, h]` of `p`.
pub fn giou_grad(p: &BBox, g: &BBox) -> [f64; 4] {
    if p.is_degenerate() {
        return [0.0; 4];
    }
    // per-axis derivative of overlap and hull extent w.r.t. (lo, hi) of p
    struct Axis {
        overlap: f64,
        d_overlap: (f64, f64),
        hull: f64,
        d_hull: (f64, f64),
    }
    let axis = |plo: f64, phi: f64, glo: f64, ghi: f64| {
        let (lo, dlo) = if plo > glo { (plo, 1.0) } else { (glo, 0.0) };
        let (hi, dhi) = if phi < ghi { (phi, 1.0) } else { (ghi, 0.0) };
        let (hlo, dhlo) = if plo < glo { (plo, 1.0) } else { (glo, 0.0) };
        let (hhi, dhhi) = if phi > ghi { (phi, 1.0) } else { (ghi, 0.0) };
        Axis {
            overlap: hi - lo,
            d_overlap: (-dlo, dhi),
            hull: hhi - hlo,
            d_hull: (-dhlo, dhhi),
        }
    };
    let ax = axis(p.x, p.x2(), g.x, g.x2());
    let ay = axis(p.y, p.y2(), g.y, g.y2());

    let overlapping = ax.overlap > 0.0 && ay.overlap > 0.0;
    let inter = if overlapping { ax.overlap * ay.overlap } else { 0.0 };
    let area_p = p.w * p.h;
    let union = area_p + g.area() - inter;
    let hull = ax.hull * ay.hull;

    // derivatives w.r.t. (x1, x2, y1, y2)
    let (d_inter, d_hull): ([f64; 4], [f64; 4]) = {
        let di = if overlapping {
            [
                ax.d_overlap.0 * ay.overlap,
                ax.d_overlap.1 * ay.overlap,
                ay.d_overlap.0 * ax.overlap,
                ay.d_overlap.1 * ax.overlap,
            ]
        } else {
            [0.0; 4]
        };
        let dh = [
            ax.d_hull.0 * ay.hull,
            ax.d_hull.1 * ay.hull,
            ay.d_hull.0 * ax.hull,
            ay.d_hull.1 * ax.hull,
        ];
        (di, dh)
    };
    let d_area = [-p.h, p.h, -p.w, p.w];
    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        // giou = inter/union - 1 + union/hull
        d_corner[k] =
            d_inter[k] / union - inter * d_union / (union * union) + d_union / hull - union * d_hull[k] / (hull * hull);
    }
    // x1 = x, x2 = x + w, y1 = y, y2 = y + h
    [
        d_corner[0] + d_corner[1],
        d_corner[2] + d_corner[3],
        d_corner[1],
        d_corner[3],
    ]
}
