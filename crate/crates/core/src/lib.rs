//! Continual relation extraction harness.
//!
//! Builds task streams from relation-extraction corpora, trains a model
//! task by task with K-means memory replay, and scores the resulting
//! accuracy matrices with the usual incremental-learning metrics.

pub mod clloop;
pub mod conformance;
pub mod corpus;
pub mod metrics;
pub mod modeling;
pub mod prompting;
pub mod protocol;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod synthetic;
