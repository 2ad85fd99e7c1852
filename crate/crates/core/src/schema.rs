//! Dataset data model, JSON ingestion and validation.
//!
//! An annotation file is one JSON object with the arrays `categories`,
//! `videos`, `images` and `annotations`. Loading checks referential integrity
//! and fails on the first broken link; [`validate`] reports softer problems
//! (contradicting negative sets, degenerate or out-of-bounds boxes) as data.
//!
//! Unknown fields are kept in each record's `extra` map and written back on
//! serialization, but are otherwise ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::BBox;

/// Tolerance (pixels) when checking that a box lies inside its image.
pub const BOUNDS_TOLERANCE_PX: f64 = 0.5;

type Extra = BTreeMap<String, Value>;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column} (field `{field}`): {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unknown label {label} in {mode} mode (prediction {index})")]
    UnknownLabel {
        index: usize,
        label: u64,
        mode: PredictionMode,
    },
    #[error("prediction {index}: expected `{expected}` label in {mode} mode")]
    LabelModeMismatch {
        index: usize,
        expected: &'static str,
        mode: PredictionMode,
    },
    #[error("prediction {index}: unknown image {image_id}")]
    UnknownImage { index: usize, image_id: u64 },
    #[error("prediction {index}: score out of range ({score})")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("prediction {index}: degenerate box")]
    DegenerateBox { index: usize },
}

impl SchemaError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::Io { .. } => "IO_ERROR",
            SchemaError::Parse { .. } => "PARSE_ERROR",
            SchemaError::Integrity(_) => "INTEGRITY_ERROR",
            SchemaError::UnknownLabel { .. } => "UNKNOWN_LABEL",
            SchemaError::LabelModeMismatch { .. } => "LABEL_MODE_MISMATCH",
            SchemaError::UnknownImage { .. } => "UNKNOWN_IMAGE",
            SchemaError::ScoreOutOfRange { .. } => "SCORE_OUT_OF_RANGE",
            SchemaError::DegenerateBox { .. } => "DEGENERATE_BOX",
        }
    }
}

pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        SchemaError::Parse {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

pub(crate) fn read_file(path: &Path) -> Result<String, SchemaError> {
    fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<u64>,
    #[serde(flatten)]
    pub extra: Extra,
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Capture device.
    Device { Vuzix => "vuzix", Aria => "aria", Rayban => "rayban", Mobile => "mobile" }
);
string_enum!(Distance { Near => "near", Medium => "medium", Far => "far" });
string_enum!(Motion { Horizontal => "horizontal", Vertical => "vertical", Combined => "combined" });
string_enum!(Background { Simple => "simple", Busy => "busy" });
string_enum!(Lighting { Bright => "bright", Dim => "dim" });

/// One captured video and its capture conditions. Condition tags are
/// optional; a missing tag makes the video fall outside every bucket of that
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub id: u64,
    pub participant_id: u64,
    pub device: Device,
    pub main_instance_id: u64,
    pub main_category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<Distance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<Motion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Background>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<Lighting>,
    #[serde(default)]
    pub location: String,
    #[serde(flatten)]
    pub extra: Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub video_id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub frame_index: u64,
    /// Categories verified absent from this image.
    #[serde(default)]
    pub neg_category_ids: BTreeSet<u64>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl ImageRecord {
    pub fn shorter_edge(&self) -> f64 {
        f64::from(self.width.min(self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u64>,
    pub bbox: BBox,
    #[serde(default)]
    pub is_main: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<u64>,
    #[serde(flatten)]
    pub extra: Extra,
}

/// On-disk layout of an annotation file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub categories: Vec<Category>,
    pub videos: Vec<VideoMeta>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<BoxAnnotation>,
    #[serde(flatten)]
    pub extra: Extra,
}

/// Immutable, cross-linked dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    file: DatasetFile,
    category_idx: HashMap<u64, usize>,
    video_idx: HashMap<u64, usize>,
    image_idx: HashMap<u64, usize>,
    anns_by_image: HashMap<u64, Vec<usize>>,
    instance_category: BTreeMap<u64, u64>,
}

fn index_ids<T>(table: &str, items: &[T], id: impl Fn(&T) -> u64) -> Result<HashMap<u64, usize>, SchemaError> {
    let mut map = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if map.insert(id(item), i).is_some() {
            return Err(SchemaError::Integrity(format!("duplicate {table} id {}", id(item))));
        }
    }
    Ok(map)
}

impl Dataset {
    /// Cross-links a parsed file, checking referential integrity.
    pub fn from_file(file: DatasetFile) -> Result<Dataset, SchemaError> {
        let category_idx = index_ids("category", &file.categories, |c| c.id)?;
        let video_idx = index_ids("video", &file.videos, |v| v.id)?;
        let image_idx = index_ids("image", &file.images, |i| i.id)?;
        index_ids("annotation", &file.annotations, |a| a.id)?;

        for c in &file.categories {
            if let Some(p) = c.parent_id {
                if !category_idx.contains_key(&p) {
                    return Err(SchemaError::Integrity(format!(
                        "category {} references missing parent {p}",
                        c.id
                    )));
                }
            }
        }
        // parent links must be acyclic
        for c in &file.categories {
            let mut seen = BTreeSet::from([c.id]);
            let mut cur = c.parent_id;
            while let Some(p) = cur {
                if !seen.insert(p) {
                    return Err(SchemaError::Integrity(format!(
                        "category {} has a cyclic parent chain",
                        c.id
                    )));
                }
                cur = file.categories[category_idx[&p]].parent_id;
            }
        }
        for v in &file.videos {
            if !category_idx.contains_key(&v.main_category_id) {
                return Err(SchemaError::Integrity(format!(
                    "video {} references missing category {}",
                    v.id, v.main_category_id
                )));
            }
        }
        for img in &file.images {
            if !video_idx.contains_key(&img.video_id) {
                return Err(SchemaError::Integrity(format!(
                    "image {} references missing video {}",
                    img.id, img.video_id
                )));
            }
            if let Some(c) = img.neg_category_ids.iter().find(|c| !category_idx.contains_key(c)) {
                return Err(SchemaError::Integrity(format!(
                    "image {} lists missing negative category {c}",
                    img.id
                )));
            }
        }

        let mut anns_by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut instance_category: BTreeMap<u64, u64> = BTreeMap::new();
        for (i, a) in file.annotations.iter().enumerate() {
            if !image_idx.contains_key(&a.image_id) {
                return Err(SchemaError::Integrity(format!(
                    "annotation {} references missing image {}",
                    a.id, a.image_id
                )));
            }
            if !category_idx.contains_key(&a.category_id) {
                return Err(SchemaError::Integrity(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )));
            }
            if let Some(inst) = a.instance_id {
                match instance_category.get(&inst) {
                    Some(&c) if c != a.category_id => {
                        return Err(SchemaError::Integrity(format!(
                            "instance {inst} has inconsistent category ({c} vs {} at annotation {})",
                            a.category_id, a.id
                        )));
                    }
                    Some(_) => {}
                    None => {
                        instance_category.insert(inst, a.category_id);
                    }
                }
            }
            anns_by_image.entry(a.image_id).or_default().push(i);
        }

        Ok(Dataset {
            file,
            category_idx,
            video_idx,
            image_idx,
            anns_by_image,
            instance_category,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Dataset, SchemaError> {
        Dataset::from_file(parse_json(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("dataset serializes")
    }

    pub fn file(&self) -> &DatasetFile {
        &self.file
    }

    pub fn into_file(self) -> DatasetFile {
        self.file
    }

    pub fn categories(&self) -> &[Category] {
        &self.file.categories
    }

    pub fn videos(&self) -> &[VideoMeta] {
        &self.file.videos
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.file.images
    }

    pub fn annotations(&self) -> &[BoxAnnotation] {
        &self.file.annotations
    }

    /// `(categories, videos, images, annotations)`.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.file.categories.len(),
            self.file.videos.len(),
            self.file.images.len(),
            self.file.annotations.len(),
        )
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.category_idx.get(&id).map(|&i| &self.file.categories[i])
    }

    pub fn video(&self, id: u64) -> Option<&VideoMeta> {
        self.video_idx.get(&id).map(|&i| &self.file.videos[i])
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.image_idx.get(&id).map(|&i| &self.file.images[i])
    }

    /// Video metadata of an image.
    pub fn image_video(&self, image_id: u64) -> Option<&VideoMeta> {
        self.image(image_id).and_then(|img| self.video(img.video_id))
    }

    /// Annotations on one image, in file order.
    pub fn image_annotations(&self, image_id: u64) -> impl Iterator<Item = &BoxAnnotation> {
        self.anns_by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.file.annotations[i])
    }

    /// Dataset-wide instance → category map.
    pub fn instance_categories(&self) -> &BTreeMap<u64, u64> {
        &self.instance_category
    }

    pub fn instance_category(&self, instance_id: u64) -> Option<u64> {
        self.instance_category.get(&instance_id).copied()
    }

    pub fn has_category(&self, id: u64) -> bool {
        self.category_idx.contains_key(&id)
    }

    pub fn has_image(&self, id: u64) -> bool {
        self.image_idx.contains_key(&id)
    }

    /// Image ids sorted ascending.
    pub fn sorted_image_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.file.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids
    }
}

/// Reads and cross-links an annotation file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SchemaError> {
    Dataset::from_json_str(&read_file(path.as_ref())?)
}

/// Label namespace of a prediction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Category,
    Instance,
}

impl PredictionMode {
    pub fn label_key(&self) -> &'static str {
        match self {
            PredictionMode::Category => "category_id",
            PredictionMode::Instance => "instance_id",
        }
    }
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionMode::Category => "category",
            PredictionMode::Instance => "instance",
        })
    }
}

/// A scored detection. `label` is a category id or an instance id depending
/// on the [`PredictionMode`] it was loaded under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub label: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Wire form of one prediction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u64>,
    pub bbox: BBox,
    pub score: f64,
    #[serde(flatten)]
    pub extra: Extra,
}

impl PredictionRecord {
    pub fn from_prediction(p: &Prediction, mode: PredictionMode) -> Self {
        let (category_id, instance_id) = match mode {
            PredictionMode::Category => (Some(p.label), None),
            PredictionMode::Instance => (None, Some(p.label)),
        };
        PredictionRecord {
            image_id: p.image_id,
            category_id,
            instance_id,
            bbox: p.bbox,
            score: p.score,
            extra: Extra::new(),
        }
    }
}

/// Set of label ids a prediction file may use.
#[derive(Debug, Clone, Copy)]
pub enum LabelSpace<'a> {
    /// Category ids (category mode) or annotated instance ids (instance mode)
    /// of the dataset.
    Dataset,
    /// An explicit registry, typically the target split.
    Registry(&'a BTreeSet<u64>),
}

/// Checks raw prediction records against a dataset and label space.
pub fn check_predictions(
    records: Vec<PredictionRecord>,
    mode: PredictionMode,
    dataset: &Dataset,
    labels: LabelSpace<'_>,
) -> Result<Vec<Prediction>, SchemaError> {
    records
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let label = match (mode, r.category_id, r.instance_id) {
                (PredictionMode::Category, Some(c), None) => c,
                (PredictionMode::Instance, None, Some(i)) => i,
                _ => {
                    return Err(SchemaError::LabelModeMismatch {
                        index,
                        expected: mode.label_key(),
                        mode,
                    })
                }
            };
            if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
                return Err(SchemaError::ScoreOutOfRange { index, score: r.score });
            }
            if r.bbox.is_degenerate() {
                return Err(SchemaError::DegenerateBox { index });
            }
            if !dataset.has_image(r.image_id) {
                return Err(SchemaError::UnknownImage {
                    index,
                    image_id: r.image_id,
                });
            }
            let known = match (labels, mode) {
                (LabelSpace::Registry(set), _) => set.contains(&label),
                (LabelSpace::Dataset, PredictionMode::Category) => dataset.has_category(label),
                (LabelSpace::Dataset, PredictionMode::Instance) => dataset.instance_category(label).is_some(),
            };
            if !known {
                return Err(SchemaError::UnknownLabel { index, label, mode });
            }
            Ok(Prediction {
                image_id: r.image_id,
                label,
                bbox: r.bbox,
                score: r.score,
            })
        })
        .collect()
}

pub fn parse_predictions(
    text: &str,
    mode: PredictionMode,
    dataset: &Dataset,
    labels: LabelSpace<'_>,
) -> Result<Vec<Prediction>, SchemaError> {
    check_predictions(parse_json(text)?, mode, dataset, labels)
}

/// Reads a prediction file (JSON array of records).
pub fn load_predictions(
    path: impl AsRef<Path>,
    mode: PredictionMode,
    dataset: &Dataset,
    labels: LabelSpace<'_>,
) -> Result<Vec<Prediction>, SchemaError> {
    parse_predictions(&read_file(path.as_ref())?, mode, dataset, labels)
}

pub fn predictions_to_json(preds: &[Prediction], mode: PredictionMode) -> String {
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| PredictionRecord::from_prediction(p, mode))
        .collect();
    serde_json::to_string_pretty(&records).expect("predictions serialize")
}

/// Machine-readable validation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    NegContradiction,
    DegenerateBox,
    BoxOutOfBounds,
    EmptyCategoryName,
    BadImageSize,
    MainCategoryMismatch,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::NegContradiction => "NEG_CONTRADICTION",
            ViolationCode::DegenerateBox => "DEGENERATE_BOX",
            ViolationCode::BoxOutOfBounds => "BOX_OUT_OF_BOUNDS",
            ViolationCode::EmptyCategoryName => "EMPTY_CATEGORY_NAME",
            ViolationCode::BadImageSize => "BAD_IMAGE_SIZE",
            ViolationCode::MainCategoryMismatch => "MAIN_CATEGORY_MISMATCH",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, message: String) -> Self {
        Violation { code, message }
    }
}

/// Checks the soft invariants of a loaded dataset. An empty result means the
/// dataset is fully consistent.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    for c in dataset.categories() {
        if c.name.trim().is_empty() {
            out.push(Violation::new(
                EmptyCategoryName,
                format!("category {} has an empty name", c.id),
            ));
        }
    }
    for v in dataset.videos() {
        if let Some(c) = dataset.instance_category(v.main_instance_id) {
            if c != v.main_category_id {
                out.push(Violation::new(
                    MainCategoryMismatch,
                    format!(
                        "video {} declares main category {} but instance {} is annotated as {c}",
                        v.id, v.main_category_id, v.main_instance_id
                    ),
                ));
            }
        }
    }
    for img in dataset.images() {
        if img.width == 0 || img.height == 0 {
            out.push(Violation::new(
                BadImageSize,
                format!("image {} has size {}x{}", img.id, img.width, img.height),
            ));
        }
        let present: BTreeSet<u64> = dataset.image_annotations(img.id).map(|a| a.category_id).collect();
        for c in present.intersection(&img.neg_category_ids) {
            out.push(Violation::new(
                NegContradiction,
                format!("image {} lists category {c} as negative but annotates it", img.id),
            ));
        }
        let (w, h) = (f64::from(img.width), f64::from(img.height));
        for a in dataset.image_annotations(img.id) {
            let b = a.bbox;
            if b.is_degenerate() {
                out.push(Violation::new(
                    DegenerateBox,
                    format!("annotation {} has degenerate box {:?}", a.id, <[f64; 4]>::from(b)),
                ));
                continue;
            }
            let t = BOUNDS_TOLERANCE_PX;
            if b.x < -t || b.y < -t || b.x2() > w + t || b.y2() > h + t {
                out.push(Violation::new(
                    BoxOutOfBounds,
                    format!("annotation {} box exceeds image {} bounds", a.id, img.id),
                ));
            }
        }
    }
    out
}

/// Programmatic construction of small datasets.
#[derive(Debug, Clone, Default)]
pub struct DatasetBuilder {
    file: DatasetFile,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn category(mut self, id: u64, name: &str) -> Self {
        self.file.categories.push(Category {
            id,
            name: name.to_string(),
            parent_id: None,
            extra: Extra::new(),
        });
        self
    }

    /// Adds a video with all four condition tags set.
    pub fn video(
        mut self,
        id: u64,
        main_instance_id: u64,
        main_category_id: u64,
        tags: (Distance, Motion, Background, Lighting),
    ) -> Self {
        self.file.videos.push(VideoMeta {
            id,
            participant_id: 0,
            device: Device::Aria,
            main_instance_id,
            main_category_id,
            distance: Some(tags.0),
            motion: Some(tags.1),
            background: Some(tags.2),
            lighting: Some(tags.3),
            location: String::new(),
            extra: Extra::new(),
        });
        self
    }

    pub fn push_video(mut self, video: VideoMeta) -> Self {
        self.file.videos.push(video);
        self
    }

    pub fn image(mut self, id: u64, video_id: u64, width: u32, height: u32, negs: &[u64]) -> Self {
        self.file.images.push(ImageRecord {
            id,
            video_id,
            width,
            height,
            frame_index: 0,
            neg_category_ids: negs.iter().copied().collect(),
            extra: Extra::new(),
        });
        self
    }

    pub fn annotation(
        mut self,
        id: u64,
        image_id: u64,
        category_id: u64,
        instance_id: Option<u64>,
        bbox: BBox,
    ) -> Self {
        self.file.annotations.push(BoxAnnotation {
            id,
            image_id,
            category_id,
            instance_id,
            bbox,
            is_main: false,
            annotator_id: None,
            extra: Extra::new(),
        });
        self
    }

    pub fn push_annotation(mut self, ann: BoxAnnotation) -> Self {
        self.file.annotations.push(ann);
        self
    }

    pub fn file(&self) -> &DatasetFile {
        &self.file
    }

    pub fn build(self) -> Result<Dataset, SchemaError> {
        Dataset::from_file(self.file)
    }
}
