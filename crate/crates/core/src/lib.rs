//! SeeCo: per-image test-time recalibration of a frozen toy
//! vision-language model for open-vocabulary dense prediction.
//!
//! During inference each image window gets a fresh adaptation session:
//! multi-view rotation agreement builds a geometric consensus target,
//! synonym-enriched text recalibration builds a semantic consensus target,
//! and a single optimizer step on low-rank adapters plus scene contexts
//! pulls the frozen model toward both before the final fused prediction.

pub mod config;
pub mod error;
pub mod gcl;
pub mod imgio;
pub mod maps;
pub mod metrics;
pub mod numerics;
pub mod oci;
pub mod pipeline;
pub mod report;
pub mod scene;
pub mod scl;
pub mod suite;
pub mod vlm;

pub use error::{Error, Result};
