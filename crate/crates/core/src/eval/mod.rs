//! Federated detection metrics.
//!
//! Category mode evaluates each category only on images that either contain
//! it or list it as a verified negative; predictions elsewhere are ignored.
//! Instance mode evaluates each registered instance on every val/test image,
//! so predicting a target that is absent is always penalized.
//!
//! For every unit (category or instance) AP is computed per IoU threshold
//! with 101-point interpolation, averaged over thresholds, then averaged
//! over units in ascending id order. Units without ground truth are skipped.

mod cl;
mod engine;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::schema::{Background, BoxAnnotation, Dataset, Lighting, Prediction, PredictionMode, SchemaError};
use crate::splits::SplitSpec;
use crate::stats::relative_scale;

pub use cl::{cl_evaluate, eap, ClReport, Experience, ExperienceStream, StreamMode};
pub use engine::{interpolated_ap, RECALL_POINTS};
pub use oracle::brute_force_ap_oracle;

use engine::{det_order, unit_ap, DetBox, GtBox, ImageProblem};

/// `0.50, 0.55, ..., 0.95`.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Relative-scale edges of the size buckets: `s < small <= m <= large < l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small: f64,
    pub large: f64,
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds {
            small: crate::conditions::MEDIUM_RATIO,
            large: crate::conditions::NEAR_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    S,
    M,
    L,
}

impl SizeThresholds {
    pub fn bucket(&self, scale: f64) -> SizeBucket {
        if scale < self.small {
            SizeBucket::S
        } else if scale > self.large {
            SizeBucket::L
        } else {
            SizeBucket::M
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Per-image, per-unit cap on predictions (highest scores kept).
    pub max_dets: Option<usize>,
    /// Also compute the condition and size breakdown.
    pub buckets: bool,
    pub size_thresholds: SizeThresholds,
    /// Restrict evaluation to these images.
    pub image_subset: Option<BTreeSet<u64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: default_iou_thresholds(),
            max_dets: None,
            buckets: false,
            size_thresholds: SizeThresholds::default(),
            image_subset: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(EvalError::Config("no IoU thresholds".into()));
        }
        if t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config(format!(
                "IoU thresholds must be strictly increasing in (0, 1]: {t:?}"
            )));
        }
        if self.max_dets == Some(0) {
            return Err(EvalError::Config("max_dets must be positive".into()));
        }
        let s = self.size_thresholds;
        if !(s.small > 0.0 && s.small <= s.large) {
            return Err(EvalError::Config(format!("invalid size thresholds {s:?}")));
        }
        Ok(())
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|v| (v - t).abs() < 1e-12)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ground truth for any evaluated {0}")]
    NoGroundTruth(&'static str),
    #[error("prediction {index}: label {label} is not an evaluated {kind}")]
    UnknownLabel {
        index: usize,
        label: u64,
        kind: &'static str,
    },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("invalid experience stream: {0}")]
    Stream(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::NoGroundTruth(_) => "NO_GROUND_TRUTH",
            EvalError::UnknownLabel { .. } => "UNKNOWN_LABEL",
            EvalError::Config(_) => "INVALID_CONFIG",
            EvalError::Stream(_) => "INVALID_STREAM",
            EvalError::Schema(e) => e.code(),
        }
    }
}

/// AP50 per condition bucket; `None` when the bucket has no ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketReport {
    #[serde(rename = "AP50_s")]
    pub ap50_s: Option<f64>,
    #[serde(rename = "AP50_m")]
    pub ap50_m: Option<f64>,
    #[serde(rename = "AP50_l")]
    pub ap50_l: Option<f64>,
    #[serde(rename = "AP50_bright")]
    pub ap50_bright: Option<f64>,
    #[serde(rename = "AP50_dim")]
    pub ap50_dim: Option<f64>,
    #[serde(rename = "AP50_simple")]
    pub ap50_simple: Option<f64>,
    #[serde(rename = "AP50_busy")]
    pub ap50_busy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAp {
    /// Category or instance id.
    pub id: u64,
    pub num_gt: usize,
    /// Mean of `ap_by_threshold`.
    pub ap: f64,
    pub ap_by_threshold: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PredictionMode,
    pub iou_thresholds: Vec<f64>,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    /// Mean over units at each threshold.
    pub ap_by_threshold: Vec<f64>,
    #[serde(rename = "AP50_seen", default, skip_serializing_if = "Option::is_none")]
    pub ap50_seen: Option<f64>,
    #[serde(rename = "AP50_unseen", default, skip_serializing_if = "Option::is_none")]
    pub ap50_unseen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<BucketReport>,
    pub num_units: usize,
    pub per_unit: Vec<UnitAp>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Which units exist and which images each one is evaluated on.
#[derive(Clone, Copy)]
enum Units<'a> {
    Category,
    Instance {
        ids: &'a BTreeSet<u64>,
        images: &'a BTreeSet<u64>,
    },
}

/// Per-image selection applied on top of the unit's own image set.
#[derive(Clone, Copy)]
enum Selector {
    All,
    Lighting(Lighting),
    Background(Background),
    Size(SizeBucket),
}

/// Ground truth and predictions grouped by `label -> image`.
struct Grouped<'a> {
    gts: BTreeMap<u64, BTreeMap<u64, Vec<&'a BoxAnnotation>>>,
    preds: BTreeMap<u64, BTreeMap<u64, Vec<usize>>>,
    negs: BTreeMap<u64, BTreeSet<u64>>,
}

impl<'a> Grouped<'a> {
    fn new(dataset: &'a Dataset, preds: &[Prediction], units: Units<'_>) -> Self {
        let mut gts: BTreeMap<u64, BTreeMap<u64, Vec<&BoxAnnotation>>> = BTreeMap::new();
        for a in dataset.annotations() {
            let label = match units {
                Units::Category => Some(a.category_id),
                Units::Instance { ids, .. } => a.instance_id.filter(|i| ids.contains(i)),
            };
            if let Some(l) = label {
                gts.entry(l).or_default().entry(a.image_id).or_default().push(a);
            }
        }
        let mut by_label: BTreeMap<u64, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
        for (i, p) in preds.iter().enumerate() {
            by_label
                .entry(p.label)
                .or_default()
                .entry(p.image_id)
                .or_default()
                .push(i);
        }
        let mut negs: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        if let Units::Category = units {
            for img in dataset.images() {
                for &c in &img.neg_category_ids {
                    negs.entry(c).or_default().insert(img.id);
                }
            }
        }
        Grouped {
            gts,
            preds: by_label,
            negs,
        }
    }
}

struct Context<'a> {
    dataset: &'a Dataset,
    preds: &'a [Prediction],
    cfg: &'a EvalConfig,
    units: Units<'a>,
    grouped: Grouped<'a>,
}

impl Context<'_> {
    fn image_selected(&self, image_id: u64, sel: Selector) -> bool {
        if let Some(subset) = &self.cfg.image_subset {
            if !subset.contains(&image_id) {
                return false;
            }
        }
        let video = || self.dataset.image_video(image_id);
        match sel {
            Selector::All | Selector::Size(_) => true,
            Selector::Lighting(l) => video().and_then(|v| v.lighting) == Some(l),
            Selector::Background(b) => video().and_then(|v| v.background) == Some(b),
        }
    }

    /// Images that can influence `label`'s AP, ascending.
    fn unit_images(&self, label: u64, sel: Selector) -> Vec<u64> {
        let empty = BTreeMap::new();
        let gts = self.grouped.gts.get(&label).unwrap_or(&empty);
        let preds = self.grouped.preds.get(&label);
        let mut out: BTreeSet<u64> = gts.keys().copied().collect();
        match self.units {
            Units::Category => {
                if let Some(n) = self.grouped.negs.get(&label) {
                    out.extend(n);
                }
            }
            Units::Instance { images, .. } => {
                out.retain(|i| images.contains(i));
                if let Some(p) = preds {
                    out.extend(p.keys().filter(|i| images.contains(i)));
                }
            }
        }
        out.into_iter().filter(|&i| self.image_selected(i, sel)).collect()
    }

    fn problem(&self, label: u64, sel: Selector) -> Vec<ImageProblem> {
        let size_of = |image_id: u64, b| {
            let img = self.dataset.image(image_id).expect("known image");
            self.cfg.size_thresholds.bucket(relative_scale(b, img).unwrap_or(0.0))
        };
        self.unit_images(label, sel)
            .into_iter()
            .map(|image_id| {
                let gts = self
                    .grouped
                    .gts
                    .get(&label)
                    .and_then(|m| m.get(&image_id))
                    .map(|v| {
                        v.iter()
                            .map(|a| GtBox {
                                bbox: a.bbox,
                                ignore: matches!(sel, Selector::Size(s) if size_of(image_id, &a.bbox) != s),
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                let mut dets: Vec<DetBox> = self
                    .grouped
                    .preds
                    .get(&label)
                    .and_then(|m| m.get(&image_id))
                    .map(|v| {
                        v.iter()
                            .map(|&i| {
                                let p = &self.preds[i];
                                DetBox {
                                    bbox: p.bbox,
                                    score: p.score,
                                    index: i,
                                    ignore_unmatched: matches!(sel, Selector::Size(s) if size_of(image_id, &p.bbox) != s),
                                }
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                dets.sort_by(det_order);
                if let Some(k) = self.cfg.max_dets {
                    dets.truncate(k);
                }
                ImageProblem { image_id, gts, dets }
            })
            .collect()
    }

    fn unit_labels(&self) -> Vec<u64> {
        match self.units {
            Units::Category => self
                .dataset
                .categories()
                .iter()
                .map(|c| c.id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            Units::Instance { ids, .. } => ids.iter().copied().collect(),
        }
    }

    /// `(label, num_gt, ap per threshold)` for every unit with ground truth.
    fn evaluate(&self, sel: Selector, thresholds: &[f64], exec: &Exec) -> Vec<(u64, usize, Vec<f64>)> {
        let labels = self.unit_labels();
        exec.map(&labels, |&l| {
            unit_ap(&self.problem(l, sel), thresholds).map(|(n, aps)| (l, n, aps))
        })
        .into_iter()
        .flatten()
        .collect()
    }

    fn ap50(&self, sel: Selector, exec: &Exec) -> Option<f64> {
        mean(self.evaluate(sel, &[0.5], exec).into_iter().map(|(_, _, a)| a[0]))
    }

    fn buckets(&self, exec: &Exec) -> BucketReport {
        BucketReport {
            ap50_s: self.ap50(Selector::Size(SizeBucket::S), exec),
            ap50_m: self.ap50(Selector::Size(SizeBucket::M), exec),
            ap50_l: self.ap50(Selector::Size(SizeBucket::L), exec),
            ap50_bright: self.ap50(Selector::Lighting(Lighting::Bright), exec),
            ap50_dim: self.ap50(Selector::Lighting(Lighting::Dim), exec),
            ap50_simple: self.ap50(Selector::Background(Background::Simple), exec),
            ap50_busy: self.ap50(Selector::Background(Background::Busy), exec),
        }
    }

    fn report(
        &self,
        mode: PredictionMode,
        unseen: Option<&BTreeSet<u64>>,
        exec: &Exec,
    ) -> Result<EvalReport, EvalError> {
        let thresholds = &self.cfg.iou_thresholds;
        let units = self.evaluate(Selector::All, thresholds, exec);
        if units.is_empty() {
            return Err(EvalError::NoGroundTruth(match mode {
                PredictionMode::Category => "category",
                PredictionMode::Instance => "instance",
            }));
        }
        let per_unit: Vec<UnitAp> = units
            .into_iter()
            .map(|(id, num_gt, ap_by_threshold)| UnitAp {
                id,
                num_gt,
                ap: mean(ap_by_threshold.iter().copied()).expect("non-empty thresholds"),
                ap_by_threshold,
                unseen: unseen.map(|u| u.contains(&id)),
            })
            .collect();
        let at = |idx: Option<usize>, filter: &dyn Fn(&UnitAp) -> bool| {
            idx.and_then(|k| mean(per_unit.iter().filter(|u| filter(u)).map(|u| u.ap_by_threshold[k])))
        };
        let i50 = self.cfg.threshold_index(0.5);
        let (ap50_seen, ap50_unseen) = match unseen {
            Some(_) => (
                at(i50, &|u| u.unseen == Some(false)),
                at(i50, &|u| u.unseen == Some(true)),
            ),
            None => (None, None),
        };
        Ok(EvalReport {
            mode,
            iou_thresholds: thresholds.clone(),
            ap: mean(per_unit.iter().map(|u| u.ap)).expect("non-empty units"),
            ap50: at(i50, &|_| true),
            ap75: at(self.cfg.threshold_index(0.75), &|_| true),
            ap_by_threshold: (0..thresholds.len())
                .map(|k| mean(per_unit.iter().map(|u| u.ap_by_threshold[k])).expect("non-empty units"))
                .collect(),
            ap50_seen,
            ap50_unseen,
            buckets: self.cfg.buckets.then(|| self.buckets(exec)),
            num_units: per_unit.len(),
            per_unit,
        })
    }
}

fn category_context<'a>(
    dataset: &'a Dataset,
    preds: &'a [Prediction],
    cfg: &'a EvalConfig,
) -> Result<Context<'a>, EvalError> {
    cfg.validate()?;
    for (index, p) in preds.iter().enumerate() {
        if !dataset.has_category(p.label) {
            return Err(EvalError::UnknownLabel {
                index,
                label: p.label,
                kind: "category",
            });
        }
    }
    Ok(Context {
        dataset,
        preds,
        cfg,
        units: Units::Category,
        grouped: Grouped::new(dataset, preds, Units::Category),
    })
}

/// Federated category-level AP.
pub fn federated_ap_category(
    dataset: &Dataset,
    preds: &[Prediction],
    cfg: &EvalConfig,
    exec: &Exec,
) -> Result<EvalReport, EvalError> {
    category_context(dataset, preds, cfg)?.report(PredictionMode::Category, None, exec)
}

/// Instance-level AP over the split's evaluation instances and val/test images.
pub fn instance_ap(
    dataset: &Dataset,
    preds: &[Prediction],
    spec: &SplitSpec,
    cfg: &EvalConfig,
    exec: &Exec,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let ids = spec.eval_instances();
    for (index, p) in preds.iter().enumerate() {
        if !ids.contains(&p.label) {
            return Err(EvalError::UnknownLabel {
                index,
                label: p.label,
                kind: "instance",
            });
        }
    }
    let images: BTreeSet<u64> = spec.eval_images().into_iter().collect();
    let units = Units::Instance {
        ids: &ids,
        images: &images,
    };
    let unseen: BTreeSet<u64> = spec.unseen_instance_ids.iter().copied().collect();
    let ctx = Context {
        dataset,
        preds,
        cfg,
        units,
        grouped: Grouped::new(dataset, preds, units),
    };
    ctx.report(PredictionMode::Instance, Some(&unseen), exec)
}

/// Condition and size breakdown of category-mode AP50.
pub fn bucket_breakdown(
    dataset: &Dataset,
    preds: &[Prediction],
    cfg: &EvalConfig,
    exec: &Exec,
) -> Result<BucketReport, EvalError> {
    Ok(category_context(dataset, preds, cfg)?.buckets(exec))
}

/// Condition and size breakdown of instance-mode AP50.
pub fn instance_bucket_breakdown(
    dataset: &Dataset,
    preds: &[Prediction],
    spec: &SplitSpec,
    cfg: &EvalConfig,
    exec: &Exec,
) -> Result<BucketReport, EvalError> {
    let cfg = EvalConfig {
        buckets: true,
        ..cfg.clone()
    };
    instance_ap(dataset, preds, spec, &cfg, exec).map(|r| r.buckets.unwrap_or_default())
}

#[cfg(test)]
mod tests;
