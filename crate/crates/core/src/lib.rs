//! Multimodal graph recommender that learns dual user and item
//! representations from a per-modality user-item graph, a user
//! co-occurrence graph and an item semantic kNN graph, trained with BPR.
//!
//! Module map:
//! - [`dataio`]: interaction/feature ingestion, k-core filtering, splits
//! - [`graphs`]: graph construction and the graph cache format
//! - [`model`]: parameters, forward and backward passes, checkpoints
//! - [`training`]: BPR loss, Adam, early stopping
//! - [`eval`]: full-ranking Recall@K / NDCG@K
//! - [`cli`]: command implementations behind the `dualrec` binary

pub mod cli;
pub mod config;
pub mod dataio;
pub mod eval;
pub mod gradcheck;
pub mod graphs;
pub mod model;
pub mod sparse;
pub mod toy;
pub mod training;
