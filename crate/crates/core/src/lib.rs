//! Component-adaptive slot clustering for generalized category discovery.
//!
//! A backbone turns each image into a grid of local features. Slot attention
//! groups the grid into up to `k_max` slots, a scorer keeps a subset of them,
//! and a masked decoder reconstructs the grid from the kept slots. Pooled slot
//! statistics are fused with the global feature and trained with supervised
//! and unsupervised contrastive losses; evaluation clusters the fused vectors
//! with semi-supervised k-means and scores them by Hungarian matching.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the concrete models.

pub mod autodiff;
pub mod backbone;
pub mod clusterer;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod representation;
pub mod scalar;
pub mod seeds;

pub use crate::error::{Error, Result};
pub use crate::eval::ClusterReport;
pub use crate::pipeline::{Checkpoint, Model, PipelineConfig, Precision};
pub use crate::scalar::Scalar;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type FeatureMap32 = backbone::FeatureMap<f32>;
pub type FeatureMap64 = backbone::FeatureMap<f64>;
pub type SlotState32 = clusterer::SlotState<f32>;
pub type SlotState64 = clusterer::SlotState<f64>;
