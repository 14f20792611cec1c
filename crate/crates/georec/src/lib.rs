//! Cross-region transfer learning for point-of-interest recommendation.
//!
//! The crate builds heterogeneous user–POI mobility graphs from check-in
//! logs, embeds users and POIs with a twin graph-attention model, and trains
//! it with a spatio-social meta-learning loop that transfers structure from a
//! data-rich source region to a data-scarce target region via cluster
//! alignment. See the crate examples for end-to-end usage of each stage.

pub mod binfmt;
pub mod cluster;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod loss;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
