//! Simulation harness for human-in-the-loop few-shot classification.
//!
//! The crate models an expert-in-the-loop labeling session on top of a
//! prototypical classifier over embedding vectors:
//!
//! - [`numerics`]: distances, softmax-on-distances, entropy.
//! - [`protonet`]: per-class mean prototypes, posteriors, incremental
//!   updates, ensemble averaging and the cluster-refined base model.
//! - [`clustering`]: deterministic k-means (Lloyd + k-means++).
//! - [`acquisition`]: the instance-selection mechanisms that decide which
//!   query instance the simulated expert labels next.
//! - [`hitl`]: the score → select → label → update loop and its metrics.
//! - [`data`]: embedding CSV ingestion, synthetic datasets, ensemble
//!   perturbation and episode sampling.
//! - [`experiment`]: repetition over seeded episodes, aggregation with
//!   confidence intervals, CSV/report emission.

pub mod acquisition;
pub mod clustering;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hitl;
pub mod numerics;
pub mod protonet;
pub mod seeding;

pub use acquisition::Mechanism;
pub use data::{EmbeddingDataset, Episode, SynthParams, TaskShape};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig};
pub use hitl::{run_episode, RunConfig, RunTrace};
pub use numerics::{Embedding, ProbVec};
pub use protonet::{BaseModelKind, Model, PrototypeSet};
