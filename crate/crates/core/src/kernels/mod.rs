//! Numerical kernels of the target-aware instance detection head.
//!
//! The kernels are pure functions over explicit parameters; nothing here
//! trains or loads weights. [`head`] holds the forward/backward passes,
//! [`loss`] the training losses, [`gradcheck`] a central-difference harness,
//! and [`selftest`] the gradient and oracle suites run by
//! `egobench kernels selftest`.

pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod selftest;
mod tensor;

use serde::{Deserialize, Serialize};

pub use head::{
    bilinear_sample, bilinear_sample_backward, cls_confidence, cls_confidence_backward, modulate, modulate_backward,
    refine_box, refine_box_at, refine_box_backward, roi_align, score_stack, softmax_center, softmax_center_backward,
    BoxPrediction, CenterPrediction, Conv3x3, Dense, Mlp, ScoreHead, DEFAULT_CLS_SIZE, DEFAULT_REFINE_HIDDEN,
    DEFAULT_SCORE_SCHEDULE, ROI_SAMPLING_RATIO,
};
pub use loss::{detection_loss, detection_loss_grad, BceLabel, ImageRole, LossBreakdown, LossConfig};
pub use tensor::{FeatureMap, PooledFeature, ScoreMap};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("coordinate {name} = {value} outside [0, {max}]")]
    OutOfRange { name: &'static str, value: f64, max: f64 },
    #[error("degenerate box")]
    DegenerateBox,
    #[error("box does not intersect the feature grid")]
    BoxOutsideGrid,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid role: {0}")]
    Role(&'static str),
    #[error("at least one reference feature is required")]
    NoReferences,
}

/// Registered target: a `C`-vector for localization and a `C x S x S`
/// feature for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDescriptor {
    pub t_loc: Vec<f64>,
    pub t_cls: PooledFeature,
}

impl TargetDescriptor {
    pub fn channels(&self) -> usize {
        self.t_loc.len()
    }

    /// Resolution `S` of `t_cls`.
    pub fn cls_size(&self) -> usize {
        self.t_cls.size()
    }
}

/// Averages the features of one or more reference views.
pub fn register_target(refs: &[(Vec<f64>, PooledFeature)]) -> Result<TargetDescriptor, KernelError> {
    let (first_loc, first_cls) = refs.first().ok_or(KernelError::NoReferences)?;
    let c = first_loc.len();
    if c == 0 || first_cls.channels() != c {
        return Err(KernelError::Shape(format!(
            "t_loc has {c} channels, t_cls has {}",
            first_cls.channels()
        )));
    }
    let mut loc = vec![0.0; c];
    let mut cls = vec![0.0; first_cls.data().len()];
    for (l, k) in refs {
        if l.len() != c || k.channels() != c || k.size() != first_cls.size() {
            return Err(KernelError::Shape("reference features disagree in shape".into()));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("t_loc"));
        }
        loc.iter_mut().zip(l).for_each(|(a, v)| *a += v);
        cls.iter_mut().zip(k.data()).for_each(|(a, v)| *a += v);
    }
    let n = refs.len() as f64;
    loc.iter_mut().for_each(|v| *v /= n);
    cls.iter_mut().for_each(|v| *v /= n);
    Ok(TargetDescriptor {
        t_loc: loc,
        t_cls: PooledFeature::new(c, first_cls.size(), cls)?,
    })
}

/// Detection head parameters: score module and refinement MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDetector {
    pub score_head: ScoreHead,
    pub refine: Mlp,
}

/// Result of running the head for one target on one query map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetDetection {
    pub center: CenterPrediction,
    pub prediction: BoxPrediction,
}

impl TargetDetector {
    /// Runs the full head: modulation, score, softmax center, box refinement,
    /// ROIAlign and confidence.
    pub fn detect(&self, f: &FeatureMap, target: &TargetDescriptor) -> Result<TargetDetection, KernelError> {
        let f_mod = modulate(f, &target.t_loc)?;
        let scores = score_stack(&f_mod, &self.score_head)?;
        let center = softmax_center(&scores)?;
        let mut prediction = refine_box(f, &center, &self.refine)?;
        let confidence = match prediction.to_bbox() {
            b if b.is_degenerate() => 0.5,
            b => match roi_align(f, &b, target.cls_size()) {
                Ok(roi) => cls_confidence(&roi, &target.t_cls)?,
                Err(KernelError::BoxOutsideGrid) => 0.5,
                Err(e) => return Err(e),
            },
        };
        prediction.confidence = Some(confidence);
        Ok(TargetDetection { center, prediction })
    }
}
