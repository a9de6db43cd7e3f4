//! Whole-page reranking of heterogeneous retrieval results under a limited
//! annotation budget.
//!
//! The crate covers the full pipeline:
//!
//! - [`dataset`]: queries with per-modality candidate queues and validation.
//! - [`datagen`]: synthetic data with modality-imbalanced upstream scores and
//!   a metered label oracle; JSONL ingestion.
//! - [`annotate`]: Top-P, percentile-band and iso-label anchor annotation
//!   plans, plus pair construction from aligned queues.
//! - [`objectives`]: pairwise hinge, listwise KL, ListMLE and the combined
//!   and online composite objectives, each with analytic score gradients.
//! - [`model`]: the cross-attention reranker with gated visual/text fusion,
//!   trained by mini-batch gradient descent with optional norm clipping.
//! - [`metrics`]: MRR@k, MAP@k, NDCG, F1, PNR, ΔGSB and entropy feature
//!   ranking.
//! - [`harness`]: config-driven experiments and report emission.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases
//! below fix the common choices.

pub mod annotate;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod seeding;

pub use dataset::{Candidate, Dataset, Grade, Modality, Query, RankedList};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Reranker in double precision (training, gradient checks).
pub type Reranker = model::RerankerModel<f64>;
/// Reranker in single precision.
pub type Reranker32 = model::RerankerModel<f32>;
pub type LossConfig = objectives::LossConfig<f64>;
pub type SupervisionBatch = objectives::SupervisionBatch<f64>;
pub type JudgedRun = metrics::JudgedRun<f64>;
pub type Ranking = RankedList<f64>;
