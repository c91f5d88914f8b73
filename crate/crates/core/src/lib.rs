//! Deterministic simulator for federated contrastive recommendation.
//!
//! Clients keep their histories and private parameters; the server only sees
//! locally privatized user embeddings and gradient updates. It clusters the
//! embeddings, ranks items against each centroid and sends every client a
//! randomized slice of hard negatives, which the client mixes with in-batch
//! and locally sampled negatives for a contrastive loss.

pub mod adam;
pub mod checkpoint;
pub mod client;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod federation;
pub mod model;
pub mod negsampling;
pub mod privacy;
pub mod rng;
pub mod synthetic;

/// Dense item index in `0..num_items`.
pub type ItemId = usize;

pub use error::{Error, Result};
