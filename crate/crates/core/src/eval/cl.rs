//! Continual-learning experience streams and EAP.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{federated_ap_category, instance_ap, EvalConfig, EvalError};
use crate::exec::Exec;
use crate::schema::{Dataset, Prediction, SchemaError};
use crate::splits::SplitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    ClassIncrementalInstance,
    DataIncrementalCategory,
}

/// One training batch. `map` is a precomputed checkpoint mAP in percent;
/// `predictions` names the checkpoint's prediction file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    #[serde(default)]
    pub instance_ids: Vec<u64>,
    #[serde(default)]
    pub image_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceStream {
    pub mode: StreamMode,
    pub experiences: Vec<Experience>,
    /// Fixed test set; empty means every evaluable image.
    #[serde(default)]
    pub test_image_ids: Vec<u64>,
    /// Dataset path, relative to the stream file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Split path (instance streams), relative to the stream file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<String>,
}

fn pairwise_disjoint(sets: impl Iterator<Item = (usize, Vec<u64>)>, what: &str) -> Result<(), EvalError> {
    let mut owner = std::collections::BTreeMap::new();
    for (i, ids) in sets {
        for id in ids {
            if let Some(j) = owner.insert(id, i) {
                if j != i {
                    return Err(EvalError::Stream(format!(
                        "{what} {id} appears in experiences {j} and {i}"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl ExperienceStream {
    pub fn from_json_str(text: &str) -> Result<Self, EvalError> {
        let stream: ExperienceStream = crate::schema::parse_json(text)?;
        stream.validate()?;
        Ok(stream)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let text = crate::schema::read_file(path.as_ref())?;
        Self::from_json_str(&text)
    }

    /// Class-incremental streams need disjoint instance sets, data-incremental
    /// ones disjoint image sets.
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.experiences.is_empty() {
            return Err(EvalError::Stream("no experiences".into()));
        }
        for (i, e) in self.experiences.iter().enumerate() {
            if let Some(m) = e.map {
                if !m.is_finite() || !(0.0..=100.0).contains(&m) {
                    return Err(EvalError::Stream(format!("experience {i}: mAP {m} outside [0, 100]")));
                }
            }
        }
        let exps = self.experiences.iter().enumerate();
        match self.mode {
            StreamMode::ClassIncrementalInstance => {
                pairwise_disjoint(exps.map(|(i, e)| (i, e.instance_ids.clone())), "instance")
            }
            StreamMode::DataIncrementalCategory => {
                pairwise_disjoint(exps.map(|(i, e)| (i, e.image_ids.clone())), "image")
            }
        }
    }

    pub fn has_precomputed_maps(&self) -> bool {
        self.experiences.iter().all(|e| e.map.is_some())
    }
}

/// Mean of the per-experience mAPs.
pub fn eap(maps: &[f64]) -> Option<f64> {
    if maps.is_empty() {
        None
    } else {
        Some(maps.iter().sum::<f64>() / maps.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClReport {
    pub mode: StreamMode,
    /// Percent.
    pub per_experience_map: Vec<f64>,
    /// Percent.
    #[serde(rename = "EAP")]
    pub eap: f64,
}

impl ClReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-checkpoint mAP (percent) and EAP.
///
/// When every experience carries a precomputed `map`, those values are used
/// directly. Otherwise each checkpoint's predictions are scored on the fixed
/// test set with the mode's AP operation (`AP`, averaged over thresholds).
pub fn cl_evaluate(
    stream: &ExperienceStream,
    per_experience_predictions: &[Vec<Prediction>],
    dataset: Option<&Dataset>,
    splits: Option<&SplitSpec>,
    cfg: &EvalConfig,
    exec: &Exec,
) -> Result<ClReport, EvalError> {
    stream.validate()?;
    let maps = if stream.has_precomputed_maps() {
        stream.experiences.iter().map(|e| e.map.expect("checked")).collect()
    } else {
        if stream.experiences.iter().any(|e| e.map.is_some()) {
            return Err(EvalError::Stream(
                "either every experience or none carries a precomputed mAP".into(),
            ));
        }
        if per_experience_predictions.len() != stream.experiences.len() {
            return Err(EvalError::Stream(format!(
                "{} experiences but {} prediction sets",
                stream.experiences.len(),
                per_experience_predictions.len()
            )));
        }
        let dataset = dataset.ok_or_else(|| EvalError::Stream("a dataset is required to score predictions".into()))?;
        let mut cfg = cfg.clone();
        if !stream.test_image_ids.is_empty() {
            let test: BTreeSet<u64> = stream.test_image_ids.iter().copied().collect();
            if let Some(id) = test.iter().find(|i| !dataset.has_image(**i)) {
                return Err(SchemaError::Integrity(format!("test image {id} not in dataset")).into());
            }
            cfg.image_subset = Some(match cfg.image_subset.take() {
                Some(s) => s.intersection(&test).copied().collect(),
                None => test,
            });
        }
        let mut maps = Vec::with_capacity(per_experience_predictions.len());
        for preds in per_experience_predictions {
            let report = match stream.mode {
                StreamMode::DataIncrementalCategory => federated_ap_category(dataset, preds, &cfg, exec)?,
                StreamMode::ClassIncrementalInstance => {
                    let spec = splits.ok_or_else(|| EvalError::Stream("instance streams need a split".into()))?;
                    instance_ap(dataset, preds, spec, &cfg, exec)?
                }
            };
            maps.push(report.ap * 100.0);
        }
        maps
    };
    Ok(ClReport {
        mode: stream.mode,
        eap: eap(&maps).expect("validated non-empty"),
        per_experience_map: maps,
    })
}
