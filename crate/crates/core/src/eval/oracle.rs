//! Brute-force AP for micro instances, written without the engine's
//! matching or interpolation code. Used as a test oracle.

use crate::geometry::BBox;

fn overlap(a: &BBox, b: &BBox) -> f64 {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return 0.0;
    }
    let left = if a.x > b.x { a.x } else { b.x };
    let top = if a.y > b.y { a.y } else { b.y };
    let right = if a.x + a.w < b.x + b.w { a.x + a.w } else { b.x + b.w };
    let bottom = if a.y + a.h < b.y + b.h { a.y + a.h } else { b.y + b.h };
    let (iw, ih) = (right - left, bottom - top);
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// AP of one label at one IoU threshold.
///
/// `gts` are `(image_id, box)` in annotation order; `dets` are
/// `(image_id, box, score)` in prediction order. Detections are visited by
/// descending score (ties: lower image id, then earlier position); each one
/// takes the free same-image ground truth with the highest IoU at or above
/// the threshold (ties: earlier ground truth). AP is the mean over the
/// recall grid `k / 100`, `k = 0..=100`, of the best precision among PR
/// points whose recall reaches the grid value.
pub fn brute_force_ap_oracle(gts: &[(u64, BBox)], dets: &[(u64, BBox, f64)], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps the comparison logic explicit
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&dets[order[j - 1]], &dets[order[j]]);
            let b_first = b.2 > a.2 || (b.2 == a.2 && (b.0 < a.0 || (b.0 == a.0 && order[j] < order[j - 1])));
            if !b_first {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }

    let mut taken = vec![false; gts.len()];
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut hits, mut seen) = (0u32, 0u32);
    for &d in &order {
        let (img, bbox, _) = dets[d];
        let mut pick: Option<usize> = None;
        let mut pick_iou = 0.0;
        for (g, (gimg, gbox)) in gts.iter().enumerate() {
            if *gimg != img || taken[g] {
                continue;
            }
            let v = overlap(&bbox, gbox);
            if v >= iou_thresh && (pick.is_none() || v > pick_iou) {
                pick = Some(g);
                pick_iou = v;
            }
        }
        seen += 1;
        if let Some(g) = pick {
            taken[g] = true;
            hits += 1;
        }
        points.push((hits as f64 / gts.len() as f64, hits as f64 / seen as f64));
    }

    let mut total = 0.0;
    for k in 0..=100u32 {
        let r = k as f64 / 100.0;
        let mut best = 0.0;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, 10.0, 10.0)
    }

    #[test]
    fn single_tp_and_fp() {
        assert_eq!(brute_force_ap_oracle(&[(1, b(0.0))], &[(1, b(0.0), 0.5)], 0.5), 1.0);
        assert_eq!(brute_force_ap_oracle(&[(1, b(0.0))], &[(1, b(50.0), 0.5)], 0.5), 0.0);
        assert_eq!(brute_force_ap_oracle(&[(1, b(0.0))], &[(2, b(0.0), 0.5)], 0.5), 0.0);
    }

    #[test]
    fn fp_ranked_first_halves_ap() {
        let ap = brute_force_ap_oracle(&[(1, b(0.0))], &[(1, b(0.0), 0.9), (2, b(0.0), 0.95)], 0.5);
        assert_eq!(ap, 0.5);
    }
}
