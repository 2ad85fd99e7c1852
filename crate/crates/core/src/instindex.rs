//! Embedding index for the target-agnostic baseline: targets are registered
//! as unit embeddings, proposals are matched by cosine similarity, and the
//! final score is the proposal score times the (clamped) similarity.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exec::Exec;
use crate::geometry::BBox;
use crate::schema::{parse_json, read_file, Prediction, SchemaError};

pub const DEFAULT_DIM: usize = 512;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Norms below this are treated as zero.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("instance {instance_id}: zero embedding vector")]
    ZeroVector { instance_id: u64 },
    #[error("embedding dimension {got}, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("instance {0}: reference embeddings average to zero")]
    DegenerateMean(u64),
    #[error("instance {0}: no reference embeddings")]
    NoEmbeddings(u64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("proposal score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

impl IndexError {
    pub fn code(&self) -> &'static str {
        match self {
            IndexError::ZeroVector { .. } => "ZERO_VECTOR",
            IndexError::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            IndexError::DegenerateMean(_) => "DEGENERATE_MEAN",
            IndexError::NoEmbeddings(_) => "NO_EMBEDDINGS",
            IndexError::NonFinite(_) => "NON_FINITE",
            IndexError::InvalidThreshold(_) => "INVALID_THRESHOLD",
            IndexError::InvalidScore(_) => "SCORE_OUT_OF_RANGE",
            IndexError::Schema(e) => e.code(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Best index entry for a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndexMatch {
    pub instance_id: u64,
    /// Cosine similarity clamped to `[0, 1]`.
    pub similarity: f64,
    /// `rpn_score * similarity`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    threshold: f64,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, threshold: f64) -> Result<Self, IndexError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(IndexError::InvalidThreshold(threshold));
        }
        if dim == 0 {
            return Err(IndexError::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(EmbeddingIndex {
            dim,
            threshold,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, instance_id: u64) -> Option<&[f64]> {
        self.entries.get(&instance_id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    fn check(&self, v: &[f64], what: &'static str) -> Result<(), IndexError> {
        if v.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFinite(what));
        }
        Ok(())
    }

    /// Stores `normalize(mean(normalize(e_i)))`, replacing any previous entry.
    pub fn register(&mut self, instance_id: u64, embeddings: &[Vec<f64>]) -> Result<(), IndexError> {
        if embeddings.is_empty() {
            return Err(IndexError::NoEmbeddings(instance_id));
        }
        let mut mean = vec![0.0; self.dim];
        for e in embeddings {
            self.check(e, "embedding")?;
            let n = norm(e);
            if n < ZERO_NORM {
                return Err(IndexError::ZeroVector { instance_id });
            }
            mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / n);
        }
        let k = embeddings.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        let n = norm(&mean);
        if n < ZERO_NORM {
            return Err(IndexError::DegenerateMean(instance_id));
        }
        mean.iter_mut().for_each(|m| *m /= n);
        self.entries.insert(instance_id, mean);
        Ok(())
    }

    /// Cosine argmax over the index (lowest id on ties). `None` when the
    /// index is empty or the best similarity is below the threshold.
    pub fn match_embedding(&self, proposal: &[f64], rpn_score: f64) -> Result<Option<IndexMatch>, IndexError> {
        self.check(proposal, "proposal embedding")?;
        if !(0.0..=1.0).contains(&rpn_score) {
            return Err(IndexError::InvalidScore(rpn_score));
        }
        let n = norm(proposal);
        if n < ZERO_NORM {
            return Ok(None);
        }
        let mut best: Option<(u64, f64)> = None;
        for (&id, e) in &self.entries {
            let cos = dot(e, proposal) / n;
            if best.is_none_or(|(_, b)| cos > b) {
                best = Some((id, cos));
            }
        }
        Ok(best.and_then(|(instance_id, cos)| {
            if cos < self.threshold {
                return None;
            }
            let similarity = cos.clamp(0.0, 1.0);
            Some(IndexMatch {
                instance_id,
                similarity,
                score: rpn_score * similarity,
            })
        }))
    }
}

/// One record of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub instance_id: u64,
    pub embedding: Vec<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A category-agnostic proposal with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub embedding: Vec<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>, IndexError> {
    Ok(parse_json(text)?)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>, IndexError> {
    parse_embeddings(&read_file(path.as_ref())?)
}

pub fn parse_proposals(text: &str) -> Result<Vec<ProposalRecord>, IndexError> {
    Ok(parse_json(text)?)
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<Vec<ProposalRecord>, IndexError> {
    parse_proposals(&read_file(path.as_ref())?)
}

/// Groups records by instance (all references of one instance are averaged)
/// and registers them in ascending id order. The dimension is taken from the
/// first record.
pub fn build_index(records: &[EmbeddingRecord], threshold: f64) -> Result<EmbeddingIndex, IndexError> {
    let dim = records.first().map_or(DEFAULT_DIM, |r| r.embedding.len());
    let mut index = EmbeddingIndex::new(dim, threshold)?;
    let mut grouped: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.instance_id).or_default().push(r.embedding.clone());
    }
    for (id, embs) in &grouped {
        index.register(*id, embs)?;
    }
    Ok(index)
}

/// Matches every proposal; unmatched proposals are dropped. Output keeps
/// proposal order.
pub fn match_proposals(
    index: &EmbeddingIndex,
    proposals: &[ProposalRecord],
    exec: &Exec,
) -> Result<Vec<Prediction>, IndexError> {
    let matched = exec.map(proposals, |p| {
        index.match_embedding(&p.embedding, p.score).map(|m| {
            m.map(|m| Prediction {
                image_id: p.image_id,
                label: m.instance_id,
                bbox: p.bbox,
                score: m.score,
            })
        })
    });
    let mut out = Vec::new();
    for m in matched {
        if let Some(p) = m? {
            out.push(p);
        }
    }
    Ok(out)
}
