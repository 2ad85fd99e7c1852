//! Capture-condition rules.
//!
//! Distance is derived from the ratio of the object scale (longer box side) to
//! the frame scale (shorter frame edge): above 0.30 is near, above 0.20 up to
//! 0.30 is medium, anything else is far. Lighting is bright strictly above 250
//! lux. Every main object is filmed in ten videos following a fixed table of
//! condition tuples, exposed by [`canonical_configs`].

use std::collections::BTreeSet;

use serde::Serialize;

use crate::schema::{Background, Dataset, Distance, Lighting, Motion};

/// Ratio above which an object counts as near.
pub const NEAR_RATIO: f64 = 0.30;
/// Ratio above which an object counts as at least medium distance.
pub const MEDIUM_RATIO: f64 = 0.20;
/// Illuminance (lux) above which a scene counts as bright.
pub const BRIGHT_LUX: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConditionError {
    #[error("object and frame scales must be positive (got {object_scale}, {frame_scale})")]
    NonPositiveScale { object_scale: f64, frame_scale: f64 },
    #[error("lux must be non-negative and finite (got {0})")]
    InvalidLux(f64),
    #[error("instance {0} is not the main object of any video")]
    UnknownInstance(u64),
}

pub fn classify_distance(object_scale: f64, frame_scale: f64) -> Result<Distance, ConditionError> {
    if !(object_scale > 0.0 && frame_scale > 0.0) || !object_scale.is_finite() || !frame_scale.is_finite() {
        return Err(ConditionError::NonPositiveScale {
            object_scale,
            frame_scale,
        });
    }
    let ratio = object_scale / frame_scale;
    Ok(if ratio > NEAR_RATIO {
        Distance::Near
    } else if ratio > MEDIUM_RATIO {
        Distance::Medium
    } else {
        Distance::Far
    })
}

pub fn classify_lighting(lux: f64) -> Result<Lighting, ConditionError> {
    if !lux.is_finite() || lux < 0.0 {
        return Err(ConditionError::InvalidLux(lux));
    }
    Ok(if lux > BRIGHT_LUX {
        Lighting::Bright
    } else {
        Lighting::Dim
    })
}

/// One row of the video configuration table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CaptureConfig {
    /// 1-based slot number.
    pub video_slot: u8,
    pub distance: Distance,
    pub motion: Motion,
    pub background: Background,
    pub lighting: Lighting,
}

impl CaptureConfig {
    pub fn tuple(&self) -> (Distance, Motion, Background, Lighting) {
        (self.distance, self.motion, self.background, self.lighting)
    }
}

const fn slot(
    video_slot: u8,
    distance: Distance,
    motion: Motion,
    background: Background,
    lighting: Lighting,
) -> CaptureConfig {
    CaptureConfig {
        video_slot,
        distance,
        motion,
        background,
        lighting,
    }
}

const CANONICAL: [CaptureConfig; 10] = {
    use Background::*;
    use Distance::*;
    use Lighting::*;
    use Motion::*;
    [
        slot(1, Near, Horizontal, Simple, Bright),
        slot(2, Medium, Horizontal, Simple, Bright),
        slot(3, Near, Horizontal, Simple, Dim),
        slot(4, Medium, Horizontal, Busy, Bright),
        slot(5, Far, Horizontal, Busy, Bright),
        slot(6, Medium, Vertical, Busy, Bright),
        slot(7, Medium, Combined, Busy, Bright),
        slot(8, Near, Horizontal, Busy, Dim),
        slot(9, Medium, Horizontal, Busy, Dim),
        slot(10, Far, Horizontal, Busy, Dim),
    ]
};

/// The ten predefined video configurations, in slot order.
pub fn canonical_configs() -> Vec<CaptureConfig> {
    CANONICAL.to_vec()
}

/// Canonical slot whose tuple matches, if any.
pub fn match_slot(distance: Distance, motion: Motion, background: Background, lighting: Lighting) -> Option<u8> {
    CANONICAL
        .iter()
        .find(|c| c.tuple() == (distance, motion, background, lighting))
        .map(|c| c.video_slot)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotCoverage {
    pub slot: CaptureConfig,
    /// Videos of the instance tagged with this slot's tuple.
    pub video_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub instance_id: u64,
    pub slots: Vec<SlotCoverage>,
    /// Videos whose tags are incomplete or match no canonical tuple.
    pub unmatched_video_ids: Vec<u64>,
}

impl CoverageReport {
    pub fn missing_slots(&self) -> Vec<u8> {
        self.slots
            .iter()
            .filter(|s| s.video_ids.is_empty())
            .map(|s| s.slot.video_slot)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(|s| !s.video_ids.is_empty())
    }
}

/// Which canonical slots the videos of a main instance cover.
pub fn check_video_coverage(dataset: &Dataset, main_instance_id: u64) -> Result<CoverageReport, ConditionError> {
    let mut videos: Vec<_> = dataset
        .videos()
        .iter()
        .filter(|v| v.main_instance_id == main_instance_id)
        .collect();
    if videos.is_empty() {
        return Err(ConditionError::UnknownInstance(main_instance_id));
    }
    videos.sort_by_key(|v| v.id);

    let mut slots: Vec<SlotCoverage> = CANONICAL
        .iter()
        .map(|&slot| SlotCoverage {
            slot,
            video_ids: Vec::new(),
        })
        .collect();
    let mut unmatched = Vec::new();
    for v in videos {
        let hit = match (v.distance, v.motion, v.background, v.lighting) {
            (Some(d), Some(m), Some(b), Some(l)) => match_slot(d, m, b, l),
            _ => None,
        };
        match hit {
            Some(s) => slots[usize::from(s) - 1].video_ids.push(v.id),
            None => unmatched.push(v.id),
        }
    }
    Ok(CoverageReport {
        instance_id: main_instance_id,
        slots,
        unmatched_video_ids: unmatched,
    })
}

/// Main instance ids declared by the dataset's videos, ascending.
pub fn main_instances(dataset: &Dataset) -> Vec<u64> {
    dataset
        .videos()
        .iter()
        .map(|v| v.main_instance_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
