//! Seeded synthetic datasets and predictions for tests and benchmarks.
//!
//! Every main object gets up to ten videos tagged with the canonical capture
//! configurations; each frame carries the main object, a few secondary
//! objects drawn from the other instances, and a random set of verified
//! negative categories.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditions::canonical_configs;
use crate::geometry::BBox;
use crate::schema::{Dataset, DatasetBuilder, Prediction, PredictionMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub categories: usize,
    /// Instances per category that are filmed as main objects.
    pub main_per_category: usize,
    /// Instances per category that only appear in other objects' videos.
    pub secondary_per_category: usize,
    /// At most 10.
    pub videos_per_main: usize,
    pub frames_per_video: usize,
    /// Upper bound on secondary objects per frame.
    pub max_secondary_per_frame: usize,
    /// Upper bound on verified-negative categories per frame.
    pub max_negatives_per_frame: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            categories: 4,
            main_per_category: 2,
            secondary_per_category: 1,
            videos_per_main: 3,
            frames_per_video: 3,
            max_secondary_per_frame: 2,
            max_negatives_per_frame: 2,
            width: 640,
            height: 480,
        }
    }
}

fn random_box(rng: &mut impl Rng, width: u32, height: u32, lo: f64, hi: f64) -> BBox {
    let (wf, hf) = (f64::from(width), f64::from(height));
    let edge = wf.min(hf);
    let w = (rng.random_range(lo..hi) * edge).round().max(2.0);
    let h = (rng.random_range(lo..hi) * edge).round().max(2.0);
    let x = rng.random_range(0.0..=(wf - w)).round();
    let y = rng.random_range(0.0..=(hf - h)).round();
    BBox::new(x, y, w, h)
}

/// Category of synthetic instance `id` (ids start at 1, grouped by category).
fn category_of(id: u64, per_category: usize) -> u64 {
    (id - 1) / per_category as u64 + 1
}

pub fn synth_dataset(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_cat = cfg.main_per_category + cfg.secondary_per_category;
    let configs = canonical_configs();
    let mut b = DatasetBuilder::new();
    for c in 1..=cfg.categories as u64 {
        b = b.category(c, &format!("category_{c}"));
    }
    let all: Vec<u64> = (1..=(cfg.categories * per_cat) as u64).collect();
    let mains: Vec<u64> = all
        .iter()
        .copied()
        .filter(|&i| ((i - 1) as usize % per_cat) < cfg.main_per_category)
        .collect();

    let (mut video_id, mut image_id, mut ann_id) = (0u64, 0u64, 0u64);
    for &main in &mains {
        let cat = category_of(main, per_cat);
        for config in configs.iter().take(cfg.videos_per_main) {
            video_id += 1;
            b = b.video(video_id, main, cat, config.tuple());
            for _ in 0..cfg.frames_per_video {
                image_id += 1;
                let mut present = BTreeSet::from([cat]);
                let mut anns = vec![(main, random_box(&mut rng, cfg.width, cfg.height, 0.08, 0.45))];
                let k = rng.random_range(0..=cfg.max_secondary_per_frame);
                let others: Vec<u64> = all.iter().copied().filter(|&i| i != main).collect();
                for &o in others.choose_multiple(&mut rng, k) {
                    present.insert(category_of(o, per_cat));
                    anns.push((o, random_box(&mut rng, cfg.width, cfg.height, 0.04, 0.25)));
                }
                let mut absent: Vec<u64> = (1..=cfg.categories as u64).filter(|c| !present.contains(c)).collect();
                absent.shuffle(&mut rng);
                let n = rng.random_range(0..=cfg.max_negatives_per_frame).min(absent.len());
                b = b.image(image_id, video_id, cfg.width, cfg.height, &absent[..n]);
                for (inst, bbox) in anns {
                    ann_id += 1;
                    b = b.annotation(ann_id, image_id, category_of(inst, per_cat), Some(inst), bbox);
                }
            }
        }
    }
    b.build().expect("synthetic dataset is consistent")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredConfig {
    pub seed: u64,
    /// Probability that a ground-truth box is detected.
    pub recall: f64,
    /// Maximum shift of a detection, as a fraction of the box side.
    pub jitter: f64,
    /// Upper bound on false positives per image.
    pub max_false_positives: usize,
}

impl Default for PredConfig {
    fn default() -> Self {
        PredConfig {
            seed: 0,
            recall: 0.8,
            jitter: 0.15,
            max_false_positives: 2,
        }
    }
}

/// Noisy predictions for `dataset`. In instance mode `labels` restricts the
/// emitted instance ids (e.g. to a split's targets); in category mode it
/// restricts categories.
pub fn synth_predictions(
    dataset: &Dataset,
    mode: PredictionMode,
    labels: Option<&BTreeSet<u64>>,
    cfg: &PredConfig,
) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let space: Vec<u64> = match (labels, mode) {
        (Some(l), _) => l.iter().copied().collect(),
        (None, PredictionMode::Category) => dataset.categories().iter().map(|c| c.id).collect(),
        (None, PredictionMode::Instance) => dataset.instance_categories().keys().copied().collect(),
    };
    let allowed: BTreeSet<u64> = space.iter().copied().collect();
    let mut out = Vec::new();
    for img in dataset.images() {
        for a in dataset.image_annotations(img.id) {
            let label = match mode {
                PredictionMode::Category => Some(a.category_id),
                PredictionMode::Instance => a.instance_id,
            };
            let Some(label) = label.filter(|l| allowed.contains(l)) else {
                continue;
            };
            if rng.random::<f64>() >= cfg.recall {
                continue;
            }
            let j = cfg.jitter;
            let dx = rng.random_range(-j..=j) * a.bbox.w;
            let dy = rng.random_range(-j..=j) * a.bbox.h;
            let sw = 1.0 + rng.random_range(-j..=j);
            let bbox = BBox::new(
                (a.bbox.x + dx).max(0.0),
                (a.bbox.y + dy).max(0.0),
                (a.bbox.w * sw).max(1.0),
                (a.bbox.h * sw).max(1.0),
            );
            out.push(Prediction {
                image_id: img.id,
                label,
                bbox,
                score: rng.random_range(0.3..1.0),
            });
        }
        if space.is_empty() {
            continue;
        }
        for _ in 0..rng.random_range(0..=cfg.max_false_positives) {
            out.push(Prediction {
                image_id: img.id,
                label: *space.choose(&mut rng).expect("non-empty"),
                bbox: random_box(&mut rng, img.width, img.height, 0.05, 0.3),
                score: rng.random_range(0.0..0.7),
            });
        }
    }
    out
}
