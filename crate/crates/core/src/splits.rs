//! Train/target/val/test split construction and verification.
//!
//! Splitting is per video: every frame of a video lands in the same split.
//! Videos showing any evaluation instance are evaluation videos; all others
//! are train. Each evaluation instance gets one reference annotation (its
//! largest relative-size view), and the reference image is held out of
//! val/test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{parse_json, read_file, Dataset, SchemaError};
use crate::stats::relative_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Evaluation instances drawn from the main instances.
    Unified,
    /// As unified, plus every instance of a withheld set of categories.
    Instdet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub mode: SplitMode,
    pub seed: u64,
    /// Fraction of main instances used for evaluation.
    pub eval_fraction: f64,
    /// Fraction of annotated categories withheld in instdet mode.
    pub withheld_fraction: f64,
    /// Fraction of evaluation videos assigned to val; the rest go to test.
    pub val_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            mode: SplitMode::Unified,
            seed: 0,
            eval_fraction: 0.5,
            withheld_fraction: 0.25,
            val_fraction: 0.5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("invalid split options: {0}")]
    Options(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

impl SplitError {
    pub fn code(&self) -> &'static str {
        match self {
            SplitError::TooSmall(_) => "DATASET_TOO_SMALL",
            SplitError::Options(_) => "INVALID_OPTIONS",
            SplitError::Schema(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetRef {
    pub instance_id: u64,
    pub image_id: u64,
    pub annotation_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_images: Vec<u64>,
    pub val_images: Vec<u64>,
    pub test_images: Vec<u64>,
    pub targets: Vec<TargetRef>,
    pub unseen_instance_ids: Vec<u64>,
}

impl SplitSpec {
    pub fn eval_instances(&self) -> BTreeSet<u64> {
        self.targets.iter().map(|t| t.instance_id).collect()
    }

    /// Val and test images, ascending.
    pub fn eval_images(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.val_images.iter().chain(&self.test_images).copied().collect();
        set.into_iter().collect()
    }

    pub fn is_unseen(&self, instance_id: u64) -> bool {
        self.unseen_instance_ids.contains(&instance_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split spec serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, SchemaError> {
        parse_json(text)
    }
}

pub fn load_splits(path: impl AsRef<Path>) -> Result<SplitSpec, SchemaError> {
    SplitSpec::from_json_str(&read_file(path.as_ref())?)
}

/// Categories with at least one annotation in the given images.
pub fn supported_categories(dataset: &Dataset, images: &[u64]) -> BTreeSet<u64> {
    images
        .iter()
        .flat_map(|&i| dataset.image_annotations(i))
        .map(|a| a.category_id)
        .collect()
}

fn take_fraction(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n)
}

pub fn build_splits(dataset: &Dataset, opts: &SplitOptions) -> Result<SplitSpec, SplitError> {
    for (name, v) in [
        ("eval_fraction", opts.eval_fraction),
        ("withheld_fraction", opts.withheld_fraction),
        ("val_fraction", opts.val_fraction),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SplitError::Options(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut withheld: BTreeSet<u64> = BTreeSet::new();
    if opts.mode == SplitMode::Instdet {
        let mut cats: Vec<u64> = dataset
            .instance_categories()
            .values()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if cats.len() < 2 {
            return Err(SplitError::TooSmall(
                "instdet mode needs instances of at least 2 categories".into(),
            ));
        }
        cats.shuffle(&mut rng);
        let k = take_fraction(cats.len(), opts.withheld_fraction).min(cats.len() - 1);
        withheld.extend(&cats[..k]);
    }

    let mut mains: Vec<u64> = dataset
        .videos()
        .iter()
        .map(|v| v.main_instance_id)
        .filter(|i| dataset.instance_category(*i).is_some_and(|c| !withheld.contains(&c)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    mains.shuffle(&mut rng);
    let n_main = match opts.mode {
        SplitMode::Unified if !mains.is_empty() => take_fraction(mains.len(), opts.eval_fraction),
        _ => ((mains.len() as f64 * opts.eval_fraction).round() as usize).min(mains.len()),
    };
    let mut eval: BTreeSet<u64> = mains[..n_main].iter().copied().collect();
    eval.extend(
        dataset
            .instance_categories()
            .iter()
            .filter(|(_, c)| withheld.contains(c))
            .map(|(i, _)| *i),
    );
    if eval.is_empty() {
        return Err(SplitError::TooSmall("no annotated main instances".into()));
    }

    // video -> images, ascending
    let mut video_images: BTreeMap<u64, Vec<u64>> = dataset.videos().iter().map(|v| (v.id, Vec::new())).collect();
    for id in dataset.sorted_image_ids() {
        let img = dataset.image(id).expect("sorted id exists");
        video_images.entry(img.video_id).or_default().push(id);
    }
    let is_eval_video = |images: &[u64]| {
        images
            .iter()
            .flat_map(|&i| dataset.image_annotations(i))
            .any(|a| a.instance_id.is_some_and(|i| eval.contains(&i)) || withheld.contains(&a.category_id))
    };
    let mut train_images = Vec::new();
    let mut eval_videos = Vec::new();
    for (vid, images) in &video_images {
        if is_eval_video(images) {
            eval_videos.push(*vid);
        } else {
            train_images.extend(images);
        }
    }
    if train_images.is_empty() {
        return Err(SplitError::TooSmall("every video shows an evaluation instance".into()));
    }

    let mut targets = Vec::new();
    for &inst in &eval {
        let best = dataset
            .annotations()
            .iter()
            .filter(|a| a.instance_id == Some(inst))
            .map(|a| {
                let img = dataset.image(a.image_id).expect("integrity checked");
                (relative_size(&a.bbox, img).unwrap_or(0.0), a)
            })
            .fold(None::<(f64, &crate::schema::BoxAnnotation)>, |acc, (s, a)| match acc {
                Some((bs, ba)) if bs > s || (bs == s && ba.id < a.id) => Some((bs, ba)),
                _ => Some((s, a)),
            });
        let (_, a) = best.ok_or_else(|| SplitError::TooSmall(format!("instance {inst} has no annotation")))?;
        targets.push(TargetRef {
            instance_id: inst,
            image_id: a.image_id,
            annotation_id: a.id,
        });
    }
    let reference_images: BTreeSet<u64> = targets.iter().map(|t| t.image_id).collect();

    eval_videos.shuffle(&mut rng);
    let n_val = ((eval_videos.len() as f64) * opts.val_fraction).round() as usize;
    let collect = |vids: &[u64]| {
        let mut v: Vec<u64> = vids
            .iter()
            .flat_map(|vid| video_images[vid].iter().copied())
            .filter(|i| !reference_images.contains(i))
            .collect();
        v.sort_unstable();
        v
    };
    let val_images = collect(&eval_videos[..n_val]);
    let test_images = collect(&eval_videos[n_val..]);
    train_images.sort_unstable();

    let seen = supported_categories(dataset, &train_images);
    let unseen_instance_ids = eval
        .iter()
        .copied()
        .filter(|i| dataset.instance_category(*i).is_some_and(|c| !seen.contains(&c)))
        .collect();

    Ok(SplitSpec {
        train_images,
        val_images,
        test_images,
        targets,
        unseen_instance_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitViolationCode {
    UnknownImage,
    UnknownInstance,
    OverlappingSplits,
    LeakedInstance,
    DuplicateTarget,
    BadReference,
    ReferenceInEval,
    BadUnseenFlag,
}

impl SplitViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitViolationCode::UnknownImage => "UNKNOWN_IMAGE",
            SplitViolationCode::UnknownInstance => "UNKNOWN_INSTANCE",
            SplitViolationCode::OverlappingSplits => "OVERLAPPING_SPLITS",
            SplitViolationCode::LeakedInstance => "LEAKED_INSTANCE",
            SplitViolationCode::DuplicateTarget => "DUPLICATE_TARGET",
            SplitViolationCode::BadReference => "BAD_REFERENCE",
            SplitViolationCode::ReferenceInEval => "REFERENCE_IN_EVAL",
            SplitViolationCode::BadUnseenFlag => "BAD_UNSEEN_FLAG",
        }
    }
}

impl fmt::Display for SplitViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitViolation {
    pub code: SplitViolationCode,
    pub message: String,
}

pub fn verify_splits(dataset: &Dataset, spec: &SplitSpec) -> Vec<SplitViolation> {
    let mut out = Vec::new();
    let mut push = |code, message: String| out.push(SplitViolation { code, message });

    let mut owner: BTreeMap<u64, &'static str> = BTreeMap::new();
    for (name, ids) in [
        ("train", &spec.train_images),
        ("val", &spec.val_images),
        ("test", &spec.test_images),
    ] {
        for &id in ids {
            if !dataset.has_image(id) {
                push(
                    SplitViolationCode::UnknownImage,
                    format!("{name} image {id} does not exist"),
                );
            }
            if let Some(prev) = owner.insert(id, name) {
                push(
                    SplitViolationCode::OverlappingSplits,
                    format!("image {id} is in both {prev} and {name}"),
                );
            }
        }
    }
    let train: BTreeSet<u64> = spec.train_images.iter().copied().collect();
    let eval_set: BTreeSet<u64> = spec.val_images.iter().chain(&spec.test_images).copied().collect();

    let mut seen_targets = BTreeSet::new();
    for t in &spec.targets {
        if !seen_targets.insert(t.instance_id) {
            push(
                SplitViolationCode::DuplicateTarget,
                format!("instance {} has more than one reference", t.instance_id),
            );
        }
        if dataset.instance_category(t.instance_id).is_none() {
            push(
                SplitViolationCode::UnknownInstance,
                format!("target instance {} does not exist", t.instance_id),
            );
        }
        match dataset.annotations().iter().find(|a| a.id == t.annotation_id) {
            Some(a) if a.instance_id == Some(t.instance_id) && a.image_id == t.image_id => {}
            Some(_) => push(
                SplitViolationCode::BadReference,
                format!(
                    "reference annotation {} is not instance {} in image {}",
                    t.annotation_id, t.instance_id, t.image_id
                ),
            ),
            None => push(
                SplitViolationCode::BadReference,
                format!("reference annotation {} does not exist", t.annotation_id),
            ),
        }
        if train.contains(&t.image_id) {
            push(
                SplitViolationCode::BadReference,
                format!(
                    "reference image {} of instance {} is a train image",
                    t.image_id, t.instance_id
                ),
            );
        }
        if eval_set.contains(&t.image_id) {
            push(
                SplitViolationCode::ReferenceInEval,
                format!(
                    "reference image {} of instance {} is in val/test",
                    t.image_id, t.instance_id
                ),
            );
        }
    }

    for &img in &spec.train_images {
        for a in dataset.image_annotations(img) {
            if let Some(i) = a.instance_id.filter(|i| seen_targets.contains(i)) {
                push(
                    SplitViolationCode::LeakedInstance,
                    format!(
                        "evaluation instance {i} is annotated in train image {img} (annotation {})",
                        a.id
                    ),
                );
            }
        }
    }

    let seen = supported_categories(dataset, &spec.train_images);
    let flagged: BTreeSet<u64> = spec.unseen_instance_ids.iter().copied().collect();
    for &i in &flagged {
        if !seen_targets.contains(&i) {
            push(
                SplitViolationCode::BadUnseenFlag,
                format!("instance {i} is flagged unseen but is not evaluated"),
            );
        }
    }
    for &i in &seen_targets {
        let Some(c) = dataset.instance_category(i) else {
            continue;
        };
        let unseen = !seen.contains(&c);
        if unseen != flagged.contains(&i) {
            push(
                SplitViolationCode::BadUnseenFlag,
                format!(
                    "instance {i} (category {c}) should be {}",
                    if unseen { "unseen" } else { "seen" }
                ),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::schema::{Background, DatasetBuilder, Distance, Lighting, Motion};

    const COND: (Distance, Motion, Background, Lighting) =
        (Distance::Near, Motion::Horizontal, Background::Simple, Lighting::Bright);

    /// 4 instances over 2 categories, 2 videos each, 2 frames per video.
    pub(crate) fn toy() -> Dataset {
        let mut b = DatasetBuilder::new().category(1, "mug").category(2, "shoe");
        let mut ann = 1;
        for inst in 1..=4u64 {
            let cat = if inst <= 2 { 1 } else { 2 };
            for v in 0..2u64 {
                let vid = inst * 10 + v;
                b = b.video(vid, inst, cat, COND);
                for f in 0..2u64 {
                    let img = vid * 10 + f;
                    b = b.image(img, vid, 100, 100, &[]);
                    let side = 10.0 + (v * 2 + f) as f64;
                    b = b.annotation(ann, img, cat, Some(inst), BBox::new(5.0, 5.0, side, side));
                    ann += 1;
                }
            }
        }
        b.build().unwrap()
    }

    #[test]
    fn instdet_withheld_category_is_unseen() {
        let ds = toy();
        let opts = SplitOptions {
            mode: SplitMode::Instdet,
            seed: 3,
            eval_fraction: 0.0,
            withheld_fraction: 0.5,
            ..SplitOptions::default()
        };
        let spec = build_splits(&ds, &opts).unwrap();
        let unseen: BTreeSet<u64> = spec.unseen_instance_ids.iter().copied().collect();
        let withheld_cat = ds.instance_category(*unseen.iter().next().unwrap()).unwrap();
        let expect: BTreeSet<u64> = [1, 2, 3, 4]
            .into_iter()
            .filter(|i| ds.instance_category(*i) == Some(withheld_cat))
            .collect();
        assert_eq!(unseen, expect);
        assert!(verify_splits(&ds, &spec).is_empty());
    }

    #[test]
    fn no_eval_instance_in_train_and_deterministic() {
        let ds = toy();
        for seed in 0..10 {
            let opts = SplitOptions {
                seed,
                ..SplitOptions::default()
            };
            let spec = build_splits(&ds, &opts).unwrap();
            assert_eq!(spec, build_splits(&ds, &opts).unwrap());
            let eval = spec.eval_instances();
            for &img in &spec.train_images {
                assert!(ds
                    .image_annotations(img)
                    .all(|a| !eval.contains(&a.instance_id.unwrap())));
            }
            assert!(verify_splits(&ds, &spec).is_empty(), "{:?}", verify_splits(&ds, &spec));
        }
    }

    #[test]
    fn reference_is_largest_view_and_out_of_eval() {
        let ds = toy();
        let spec = build_splits(
            &ds,
            &SplitOptions {
                eval_fraction: 1.0,
                ..SplitOptions::default()
            },
        );
        // everything is evaluated, so nothing is left to train on
        assert_eq!(spec.unwrap_err().code(), "DATASET_TOO_SMALL");
        let spec = build_splits(
            &ds,
            &SplitOptions {
                eval_fraction: 0.25,
                ..SplitOptions::default()
            },
        )
        .unwrap();
        let t = spec.targets[0];
        // largest side is the second frame of the second video
        let vid = t.instance_id * 10 + 1;
        assert_eq!(t.image_id, vid * 10 + 1);
        assert!(!spec.eval_images().contains(&t.image_id));
        assert_eq!(spec.eval_images().len(), 3);
    }

    #[test]
    fn leak_is_detected() {
        let ds = toy();
        let mut spec = build_splits(&ds, &SplitOptions::default()).unwrap();
        let img = spec.test_images.pop().or_else(|| spec.val_images.pop()).unwrap();
        spec.train_images.push(img);
        let v = verify_splits(&ds, &spec);
        assert!(v.iter().any(|v| v.code == SplitViolationCode::LeakedInstance), "{v:?}");
    }

    #[test]
    fn bad_unseen_flag_is_detected() {
        let ds = toy();
        let mut spec = build_splits(&ds, &SplitOptions::default()).unwrap();
        assert!(spec.unseen_instance_ids.is_empty());
        spec.unseen_instance_ids.push(spec.targets[0].instance_id);
        let v = verify_splits(&ds, &spec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, SplitViolationCode::BadUnseenFlag);
    }

    #[test]
    fn duplicate_and_overlap_detected() {
        let ds = toy();
        let mut spec = build_splits(&ds, &SplitOptions::default()).unwrap();
        spec.targets.push(spec.targets[0]);
        spec.val_images.push(spec.train_images[0]);
        let codes: BTreeSet<_> = verify_splits(&ds, &spec).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&SplitViolationCode::DuplicateTarget));
        assert!(codes.contains(&SplitViolationCode::OverlappingSplits));
    }

    #[test]
    fn json_form() {
        let ds = toy();
        let spec = build_splits(&ds, &SplitOptions::default()).unwrap();
        let text = spec.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "train_images",
            "val_images",
            "test_images",
            "targets",
            "unseen_instance_ids",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["targets"][0].get("annotation_id").is_some());
        assert_eq!(SplitSpec::from_json_str(&text).unwrap(), spec);
    }

    #[test]
    fn bad_options() {
        let ds = toy();
        let opts = SplitOptions {
            val_fraction: 1.5,
            ..SplitOptions::default()
        };
        assert_eq!(build_splits(&ds, &opts).unwrap_err().code(), "INVALID_OPTIONS");
    }
}
