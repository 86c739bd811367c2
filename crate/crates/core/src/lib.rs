//! Routing-pathway analysis for mixture-of-experts models.
//!
//! The crate bundles a small, fully inspectable MoE lab with the metrics
//! that monitor how its routing reorganizes during training:
//!
//! - [`moe`] — toy MoE models: forward, routing records, expert training
//!   with an optionally frozen router, tangent features at initialization.
//! - [`pathway`] — pathway extraction by cumulative gate weight, canonical
//!   string encoding, token-level edit distance, routing entropy.
//! - [`consistency`] — routing embeddings and cross-layer consistency.
//! - [`dynamics`] — memorization/generalization step detection, grouping,
//!   threshold calibration, contamination filtering, parameter dynamics.
//! - [`pairing`] — group similarity and optimal one-to-one assignment.
//! - [`kernel`] — routing-kernel Gram matrices, effective dimension, ridge
//!   regression, bound terms, and the router-seed study.
//! - [`stats`] — correlations with p-values, moving averages, trend fits.
//! - [`demo`] — the bundled synthetic training run tying it all together.
//!
//! Numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`, which is what the CLI uses.

pub mod consistency;
pub mod data;
pub mod demo;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod moe;
pub mod pairing;
pub mod pathway;
pub mod report;
pub mod scalar;
pub mod stats;
pub mod study;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use scalar::Real;

use serde::{Deserialize, Serialize};

/// Opaque sample identifier used across records, series, and reports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(String);

impl SampleId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

// Concrete `f64` instantiations of the core types.
pub type Model64 = moe::MoEModel<f64>;
pub type RoutingRecord64 = moe::RoutingRecord<f64>;
pub type TrainingTrace64 = moe::TrainingTrace<f64>;
pub type CheckpointSeries64 = dynamics::CheckpointSeries<f64>;
pub type KernelGram64 = kernel::KernelGram<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type LabeledSet64 = data::LabeledSet<f64>;
