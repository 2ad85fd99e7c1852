//! Per-unit AP: greedy matching per image, a global ranking, and 101-point
//! interpolation.

use std::cmp::Ordering;

use crate::geometry::{greedy_match_ious, iou, BBox};

/// Number of recall grid points.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GtBox {
    pub bbox: BBox,
    /// Outside the current bucket: not counted, and predictions matched to it
    /// are dropped.
    pub ignore: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DetBox {
    pub bbox: BBox,
    pub score: f64,
    /// Position in the caller's prediction list.
    pub index: usize,
    /// Dropped instead of counted as a false positive when unmatched.
    pub ignore_unmatched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ImageProblem {
    pub image_id: u64,
    pub gts: Vec<GtBox>,
    /// Sorted by descending score, then ascending index.
    pub dets: Vec<DetBox>,
}

/// Descending score, ascending index.
pub(crate) fn det_order(a: &DetBox, b: &DetBox) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

fn match_image(img: &ImageProblem, thresh: f64) -> Vec<Outcome> {
    let ious: Vec<Vec<f64>> = img
        .dets
        .iter()
        .map(|d| img.gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let m = greedy_match_ious(&ious, img.gts.len(), thresh);
    img.dets
        .iter()
        .zip(&m.pred_to_gt)
        .map(|(d, g)| match g {
            Some(g) if img.gts[*g].ignore => Outcome::Ignored,
            Some(_) => Outcome::Tp,
            None if d.ignore_unmatched => Outcome::Ignored,
            None => Outcome::Fp,
        })
        .collect()
}

/// 101-point interpolated AP of a ranked TP/FP sequence.
pub fn interpolated_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || ranked_tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in ranked_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&v| v < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP at each threshold for one unit, or `None` without counted ground truth.
pub(crate) fn unit_ap(images: &[ImageProblem], thresholds: &[f64]) -> Option<(usize, Vec<f64>)> {
    let n_gt: usize = images.iter().map(|i| i.gts.iter().filter(|g| !g.ignore).count()).sum();
    if n_gt == 0 {
        return None;
    }
    // global ranking: score desc, image asc, index asc
    let mut ranking: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(ii, img)| (0..img.dets.len()).map(move |di| (ii, di)))
        .collect();
    ranking.sort_by(|&(ia, da), &(ib, db)| {
        let (a, b) = (&images[ia].dets[da], &images[ib].dets[db]);
        b.score
            .total_cmp(&a.score)
            .then(images[ia].image_id.cmp(&images[ib].image_id))
            .then(a.index.cmp(&b.index))
    });
    let aps = thresholds
        .iter()
        .map(|&t| {
            let outcomes: Vec<Vec<Outcome>> = images.iter().map(|img| match_image(img, t)).collect();
            let ranked: Vec<bool> = ranking
                .iter()
                .map(|&(ii, di)| outcomes[ii][di])
                .filter(|o| *o != Outcome::Ignored)
                .map(|o| o == Outcome::Tp)
                .collect();
            interpolated_ap(&ranked, n_gt)
        })
        .collect();
    Some((n_gt, aps))
}
