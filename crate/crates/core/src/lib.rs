//! KV cache eviction on a small, fully specified decoder.
//!
//! The crate builds a seeded multi-head (optionally grouped-query) decoder,
//! prefills it layer by layer and compresses the per-layer KV caches under
//! a global entry budget. Eviction policies combine a token score, a
//! layer-level budget allocation and a head-level split; the metrics module
//! measures the exact attention output loss of each eviction together with
//! two upper bounds.
//!
//! Work that fans out over independent items goes through [`exec::Exec`],
//! which uses rayon when the `parallel` feature is enabled (the default).

pub mod allocation;
pub mod cache;
pub mod engine;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod scoring;
pub mod toymodel;

pub use error::{Error, Result};
