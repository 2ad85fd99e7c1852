//! Dataset statistics: per-category counts, box-center and relative-size
//! histograms, condition-tag counts and summary scalars.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::exec::Exec;
use crate::geometry::BBox;
use crate::schema::{BoxAnnotation, Dataset, ImageRecord};

pub const DEFAULT_CENTER_BINS: usize = 50;
pub const DEFAULT_SIZE_BINS: usize = 40;
/// Upper edge of the relative-size histogram; larger values fall in the last bin.
pub const DEFAULT_SIZE_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("image {0} has zero area")]
    DegenerateImage(u64),
    #[error("invalid histogram configuration: {0}")]
    Bins(String),
}

/// `sqrt(box area / image area)`.
pub fn relative_size(bbox: &BBox, image: &ImageRecord) -> Result<f64, StatsError> {
    let area = image.width as f64 * image.height as f64;
    if area <= 0.0 {
        return Err(StatsError::DegenerateImage(image.id));
    }
    Ok((bbox.area() / area).sqrt())
}

/// Longer box side over the shorter image edge.
pub fn relative_scale(bbox: &BBox, image: &ImageRecord) -> Result<f64, StatsError> {
    let edge = image.shorter_edge();
    if edge <= 0.0 {
        return Err(StatsError::DegenerateImage(image.id));
    }
    Ok(bbox.longer_side() / edge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatsBins {
    pub center: usize,
    pub size: usize,
    pub size_max: f64,
}

impl Default for StatsBins {
    fn default() -> Self {
        StatsBins {
            center: DEFAULT_CENTER_BINS,
            size: DEFAULT_SIZE_BINS,
            size_max: DEFAULT_SIZE_MAX,
        }
    }
}

/// Square histogram over `[0, 1]^2`; `counts[row][col]` with rows along y.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram2d {
    pub bins: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Histogram2d {
    fn new(bins: usize) -> Self {
        Histogram2d {
            bins,
            counts: vec![vec![0; bins]; bins],
        }
    }

    fn add(&mut self, x: f64, y: f64) {
        let (c, r) = (bin_of(x, 1.0, self.bins), bin_of(y, 1.0, self.bins));
        self.counts[r][c] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram1d {
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram1d {
    fn new(bins: usize, max: f64) -> Self {
        Histogram1d {
            max,
            counts: vec![0; bins],
        }
    }

    /// `(lower, upper)` edges of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = self.max / self.counts.len() as f64;
        (i as f64 * w, (i + 1) as f64 * w)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn bin_of(v: f64, max: f64, bins: usize) -> usize {
    if v.is_nan() || v <= 0.0 {
        return 0;
    }
    ((v / max * bins as f64) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryStats {
    pub category_id: u64,
    pub name: String,
    pub instance_count: u64,
    pub annotation_count: u64,
    pub image_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub images: u64,
    pub annotations: u64,
    pub instances: u64,
    pub main_instances: u64,
    pub secondary_instances: u64,
    /// Distinct (image, instance) pairs.
    pub incidences: u64,
    pub mean_instances_per_image: f64,
    pub mean_images_per_instance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub categories: Vec<CategoryStats>,
    pub centers_main: Histogram2d,
    pub centers_all: Histogram2d,
    pub sizes_main: Histogram1d,
    pub sizes_all: Histogram1d,
    /// tag name -> value -> number of videos.
    pub metadata: BTreeMap<String, BTreeMap<String, u64>>,
    pub summary: Summary,
}

/// An annotation of the video's main object.
pub fn is_main_annotation(dataset: &Dataset, a: &BoxAnnotation) -> bool {
    a.is_main
        || dataset
            .image_video(a.image_id)
            .is_some_and(|v| a.instance_id == Some(v.main_instance_id))
}

/// One annotation's contribution, binned after the parallel pass.
struct Record {
    center: (f64, f64),
    size_bin: usize,
    is_main: bool,
    category_id: u64,
    instance_id: Option<u64>,
}

pub fn compute_stats(dataset: &Dataset, bins: &StatsBins, exec: &Exec) -> Result<StatsReport, StatsError> {
    if bins.center == 0 || bins.size == 0 || bins.size_max.is_nan() || bins.size_max <= 0.0 {
        return Err(StatsError::Bins(format!("{bins:?}")));
    }
    let images = dataset.sorted_image_ids();
    let per_image = exec.map(&images, |&id| -> Result<Vec<Record>, StatsError> {
        let img = dataset.image(id).expect("sorted id exists");
        dataset
            .image_annotations(id)
            .map(|a| {
                let (cx, cy) = a.bbox.center();
                Ok(Record {
                    center: (cx / img.width as f64, cy / img.height as f64),
                    size_bin: bin_of(relative_size(&a.bbox, img)?, bins.size_max, bins.size),
                    is_main: is_main_annotation(dataset, a),
                    category_id: a.category_id,
                    instance_id: a.instance_id,
                })
            })
            .collect()
    });

    let mut centers_main = Histogram2d::new(bins.center);
    let mut centers_all = Histogram2d::new(bins.center);
    let mut sizes_main = Histogram1d::new(bins.size, bins.size_max);
    let mut sizes_all = Histogram1d::new(bins.size, bins.size_max);
    let mut ann_per_cat: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pairs: BTreeSet<(u64, u64)> = BTreeSet::new();
    for (records, &image_id) in per_image.into_iter().zip(&images) {
        for r in records? {
            centers_all.add(r.center.0, r.center.1);
            sizes_all.counts[r.size_bin] += 1;
            if r.is_main {
                centers_main.add(r.center.0, r.center.1);
                sizes_main.counts[r.size_bin] += 1;
            }
            *ann_per_cat.entry(r.category_id).or_default() += 1;
            if let Some(inst) = r.instance_id {
                pairs.insert((inst, image_id));
            }
        }
    }

    let mut inst_per_cat: BTreeMap<u64, u64> = BTreeMap::new();
    for c in dataset.instance_categories().values() {
        *inst_per_cat.entry(*c).or_default() += 1;
    }
    let mut img_per_cat: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for a in dataset.annotations() {
        img_per_cat.entry(a.category_id).or_default().insert(a.image_id);
    }
    let categories = dataset
        .categories()
        .iter()
        .map(|c| CategoryStats {
            category_id: c.id,
            name: c.name.clone(),
            instance_count: inst_per_cat.get(&c.id).copied().unwrap_or(0),
            annotation_count: ann_per_cat.get(&c.id).copied().unwrap_or(0),
            image_count: img_per_cat.get(&c.id).map_or(0, |s| s.len() as u64),
        })
        .collect();

    let mut metadata: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for v in dataset.videos() {
        let tags = [
            ("device", Some(v.device.as_str())),
            ("distance", v.distance.map(|t| t.as_str())),
            ("motion", v.motion.map(|t| t.as_str())),
            ("background", v.background.map(|t| t.as_str())),
            ("lighting", v.lighting.map(|t| t.as_str())),
        ];
        for (tag, value) in tags {
            let value = value.unwrap_or("unknown");
            *metadata
                .entry(tag.to_string())
                .or_default()
                .entry(value.to_string())
                .or_default() += 1;
        }
    }

    let mains: BTreeSet<u64> = dataset
        .videos()
        .iter()
        .map(|v| v.main_instance_id)
        .filter(|i| dataset.instance_category(*i).is_some())
        .collect();
    let instances = dataset.instance_categories().len() as u64;
    let n_images = images.len() as u64;
    let incidences = pairs.len() as u64;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let summary = Summary {
        images: n_images,
        annotations: dataset.annotations().len() as u64,
        instances,
        main_instances: mains.len() as u64,
        secondary_instances: instances - mains.len() as u64,
        incidences,
        mean_instances_per_image: ratio(incidences, n_images),
        mean_images_per_instance: ratio(incidences, instances),
    };

    Ok(StatsReport {
        categories,
        centers_main,
        centers_all,
        sizes_main,
        sizes_all,
        metadata,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Background, DatasetBuilder, Distance, Lighting, Motion};
    use proptest::prelude::*;

    const COND: (Distance, Motion, Background, Lighting) =
        (Distance::Far, Motion::Vertical, Background::Busy, Lighting::Dim);

    fn img(w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id: 1,
            video_id: 1,
            width: w,
            height: h,
            frame_index: 0,
            neg_category_ids: Default::default(),
            extra: Default::default(),
        }
    }

    #[test]
    fn relative_size_examples() {
        assert!((relative_size(&BBox::new(0.0, 0.0, 100.0, 100.0), &img(1000, 1000)).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(
            relative_size(&BBox::new(0.0, 0.0, 640.0, 480.0), &img(640, 480)).unwrap(),
            1.0
        );
        let r = relative_size(&BBox::new(0.0, 0.0, 50.0, 200.0), &img(1000, 500)).unwrap();
        assert!((r - 0.02f64.sqrt()).abs() < 1e-15 && (r - 0.1414).abs() < 1e-4);
        assert_eq!(
            relative_size(&BBox::new(0.0, 0.0, 1.0, 1.0), &img(0, 5)),
            Err(StatsError::DegenerateImage(1))
        );
    }

    #[test]
    fn relative_scale_uses_shorter_edge() {
        assert_eq!(
            relative_scale(&BBox::new(0.0, 0.0, 35.0, 10.0), &img(200, 100)).unwrap(),
            0.35
        );
    }

    #[test]
    fn single_centered_annotation() {
        let ds = DatasetBuilder::new()
            .category(1, "cup")
            .video(1, 5, 1, COND)
            .image(1, 1, 100, 100, &[])
            .annotation(1, 1, 1, Some(5), BBox::new(40.0, 40.0, 20.0, 20.0))
            .build()
            .unwrap();
        let r = compute_stats(&ds, &StatsBins::default(), &Exec::Sequential).unwrap();
        assert_eq!(r.centers_all.total(), 1);
        assert_eq!(r.centers_all.counts[25][25], 1);
        assert_eq!(r.centers_main.counts[25][25], 1);
        assert_eq!(r.metadata["lighting"]["dim"], 1);
        assert_eq!(r.summary.main_instances, 1);
    }

    #[test]
    fn images_per_instance() {
        let mut b = DatasetBuilder::new().category(1, "cup").video(1, 5, 1, COND);
        for i in 1..=10 {
            b = b
                .image(i, 1, 100, 100, &[])
                .annotation(i, i, 1, Some(5), BBox::new(1.0, 1.0, 5.0, 5.0));
        }
        let r = compute_stats(&b.build().unwrap(), &StatsBins::default(), &Exec::Sequential).unwrap();
        assert_eq!(r.summary.mean_images_per_instance, 10.0);
        assert_eq!(r.summary.mean_instances_per_image, 1.0);
    }

    #[test]
    fn long_tail_counts_match_tally() {
        let mut b = DatasetBuilder::new().video(1, 1, 1, COND).image(1, 1, 100, 100, &[]);
        let mut ann = 1;
        for c in 1..=6u64 {
            b = b.category(c, &format!("c{c}"));
            for k in 0..(64 >> c) {
                b = b.annotation(ann, 1, c, Some(c * 100 + k % 3), BBox::new(1.0, 1.0, 4.0, 4.0));
                ann += 1;
            }
        }
        let ds = b.build().unwrap();
        let r = compute_stats(&ds, &StatsBins::default(), &Exec::Parallel).unwrap();
        for cs in &r.categories {
            let tally = ds
                .annotations()
                .iter()
                .filter(|a| a.category_id == cs.category_id)
                .count() as u64;
            assert_eq!(cs.annotation_count, tally);
            assert_eq!(cs.annotation_count, 64 >> cs.category_id);
            assert_eq!(cs.instance_count, (64u64 >> cs.category_id).min(3));
        }
        assert_eq!(
            r.categories.iter().map(|c| c.annotation_count).sum::<u64>(),
            ds.annotations().len() as u64
        );
        assert_eq!(r.sizes_all.total(), ds.annotations().len() as u64);
    }

    proptest! {
        #[test]
        fn relative_size_scale_invariant(w in 1.0f64..100.0, h in 1.0f64..100.0, k in 1u32..8) {
            let a = relative_size(&BBox::new(0.0, 0.0, w, h), &img(100, 200)).unwrap();
            let kf = k as f64;
            let b = relative_size(&BBox::new(0.0, 0.0, w * kf, h * kf), &img(100 * k, 200 * k)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
