//! Benchmark toolkit for egocentric fine-grained object detection.
//!
//! The crate covers the whole evaluation pipeline around a federated,
//! instance-labelled detection dataset:
//!
//! * [`schema`]: annotation/prediction data model, JSON ingestion and validation
//! * [`conditions`]: capture-condition rules and the ten canonical video configurations
//! * [`geometry`]: IoU, GIoU and score-ordered greedy matching
//! * [`consensus`]: multi-annotator reconciliation by averaged IoU agreement
//! * [`kernels`]: numerical kernels of the target-aware instance detection head
//! * [`instindex`]: embedding index for target-agnostic instance matching
//! * [`splits`]: train/target/val/test split construction and verification
//! * [`eval`]: federated category AP, instance AP, condition buckets and EAP
//! * [`stats`]: dataset statistics tables
//! * [`synth`]: seeded synthetic datasets and predictions
//!
//! Work that fans out over categories, instances or images goes through
//! [`exec::Exec`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise. Results are always reduced in a
//! fixed order so reports are bit-identical regardless of thread count.

pub mod conditions;
pub mod consensus;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod instindex;
pub mod kernels;
pub mod schema;
pub mod splits;
pub mod stats;
pub mod synth;

pub use exec::Exec;
pub use geometry::BBox;
pub use schema::{Dataset, Prediction, PredictionMode};

/// Crate version, shared with the command-line front end.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
