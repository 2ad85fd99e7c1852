//! Multi-annotator reconciliation.
//!
//! Each annotator's boxes on an image are compared with every other
//! annotator's: boxes are paired within the same category by descending IoU,
//! and the agreement of `a` with `b` is the mean matched IoU over `a`'s boxes.
//! An annotator's consensus score is the mean agreement with all others, and
//! the top scorer (lowest id on ties) becomes the source of truth.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::exec::Exec;
use crate::geometry::iou;
use crate::schema::{BoxAnnotation, Dataset};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsensusError {
    #[error("annotations span several images ({0} and {1})")]
    MixedImages(u64, u64),
    #[error("image {image_id}: consensus needs at least 2 annotators, got {count}")]
    TooFewAnnotators { image_id: u64, count: usize },
    #[error("annotation {0} has no annotator_id")]
    MissingAnnotator(u64),
}

/// Agreement of `a` with `b` on one image, in `[0, 1]`.
///
/// Matching is within category, greedy on descending IoU without a threshold.
/// Unmatched boxes of `a` contribute 0. Two empty lists agree perfectly.
pub fn pairwise_agreement(a: &[BoxAnnotation], b: &[BoxAnnotation]) -> Result<f64, ConsensusError> {
    if let Some(first) = a.iter().chain(b).next() {
        if let Some(other) = a.iter().chain(b).find(|x| x.image_id != first.image_id) {
            return Err(ConsensusError::MixedImages(first.image_id, other.image_id));
        }
    }
    if a.is_empty() {
        return Ok(if b.is_empty() { 1.0 } else { 0.0 });
    }

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if x.category_id == y.category_id {
                let v = iou(&x.bbox, &y.bbox);
                if v > 0.0 {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));

    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut total = 0.0;
    for (v, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            total += v;
        }
    }
    Ok(total / a.len() as f64)
}

/// All annotators' boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorSet {
    pub image_id: u64,
    /// `(annotator_id, boxes)`; an annotator may have no boxes.
    pub annotators: Vec<(u64, Vec<BoxAnnotation>)>,
}

impl AnnotatorSet {
    pub fn new(image_id: u64, annotators: Vec<(u64, Vec<BoxAnnotation>)>) -> Result<Self, ConsensusError> {
        for (_, anns) in &annotators {
            if let Some(a) = anns.iter().find(|a| a.image_id != image_id) {
                return Err(ConsensusError::MixedImages(image_id, a.image_id));
            }
        }
        Ok(AnnotatorSet { image_id, annotators })
    }

    fn check(&self) -> Result<(), ConsensusError> {
        if self.annotators.len() < 2 {
            return Err(ConsensusError::TooFewAnnotators {
                image_id: self.image_id,
                count: self.annotators.len(),
            });
        }
        Ok(())
    }
}

/// Per-annotator consensus scores, in the set's annotator order.
pub fn consensus_scores(set: &AnnotatorSet) -> Result<Vec<(u64, f64)>, ConsensusError> {
    set.check()?;
    let n = set.annotators.len();
    set.annotators
        .iter()
        .enumerate()
        .map(|(k, (id, mine))| {
            let mut sum = 0.0;
            for (j, (_, theirs)) in set.annotators.iter().enumerate() {
                if j != k {
                    sum += pairwise_agreement(mine, theirs)?;
                }
            }
            Ok((*id, sum / (n - 1) as f64))
        })
        .collect()
}

/// Annotator with the highest consensus score; lowest id wins ties.
pub fn select_source_of_truth(set: &AnnotatorSet) -> Result<u64, ConsensusError> {
    let scores = consensus_scores(set)?;
    Ok(pick_winner(&scores))
}

fn pick_winner(scores: &[(u64, f64)]) -> u64 {
    let mut best = scores[0];
    for &(id, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && id < best.0) {
            best = (id, s);
        }
    }
    best.0
}

/// Consensus outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageConsensus {
    pub image_id: u64,
    pub winner: u64,
    pub scores: Vec<(u64, f64)>,
}

/// Groups a multi-annotator dataset into one [`AnnotatorSet`] per image.
///
/// The annotators of an image are all annotators seen anywhere in the same
/// video, so someone who drew no boxes on a frame still counts (and scores 0
/// against anyone who did). Annotators are listed in ascending id order.
pub fn annotator_sets(dataset: &Dataset) -> Result<Vec<AnnotatorSet>, ConsensusError> {
    let mut per_video: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for a in dataset.annotations() {
        let who = a.annotator_id.ok_or(ConsensusError::MissingAnnotator(a.id))?;
        let video = dataset.image(a.image_id).map(|i| i.video_id).unwrap_or_default();
        per_video.entry(video).or_default().insert(who);
    }
    let mut sets = Vec::new();
    for image_id in dataset.sorted_image_ids() {
        let video = dataset.image(image_id).map(|i| i.video_id).unwrap_or_default();
        let Some(who) = per_video.get(&video) else {
            continue;
        };
        let mut by_annotator: BTreeMap<u64, Vec<BoxAnnotation>> = who.iter().map(|&w| (w, Vec::new())).collect();
        for a in dataset.image_annotations(image_id) {
            if let Some(w) = a.annotator_id {
                by_annotator.entry(w).or_default().push(a.clone());
            }
        }
        sets.push(AnnotatorSet {
            image_id,
            annotators: by_annotator.into_iter().collect(),
        });
    }
    Ok(sets)
}

/// Reconciles every image of a multi-annotator dataset.
pub fn reconcile(dataset: &Dataset, exec: &Exec) -> Result<Vec<ImageConsensus>, ConsensusError> {
    let sets = annotator_sets(dataset)?;
    exec.map(&sets, |set| {
        let scores = consensus_scores(set)?;
        Ok(ImageConsensus {
            image_id: set.image_id,
            winner: pick_winner(&scores),
            scores,
        })
    })
    .into_iter()
    .collect()
}
