//! Desk-scale simulator for federated prototype learning with content/style
//! decomposition, FiLM personalization, and attention-based server
//! aggregation.
//!
//! Everything runs in-process on synthetic Gaussian-mixture data: clients
//! train local encoders against broadcast class prototypes, upload per-class
//! feature means, and a server refines those means with a small transformer
//! before attention-weighted re-aggregation. Baseline arms (plain uniform
//! averaging, attention without personalization) share the same loop so runs
//! are comparable. All randomness flows through seed-derived ChaCha streams;
//! repeated runs are bit-identical regardless of worker-thread count.

pub mod client;
pub mod data;
pub mod encoder;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
