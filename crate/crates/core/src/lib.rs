//! Group inference by clustering per-sample loss gradients.
//!
//! The pipeline trains an ERM classifier, maps each sample to the gradient of
//! its loss with respect to the model parameters, clusters those gradients per
//! class with DBSCAN (outliers get label `-1`), and trains a group-DRO model on
//! the inferred groups with the outliers removed.
//!
//! Module map:
//! - [`dataset`]: synthetic benchmark, contamination, CSV ingestion, splits
//! - [`model`]: linear / logistic / MLP classifiers, ERM training
//! - [`gradspace`]: per-sample gradients and per-class distance matrices
//! - [`clustering`]: DBSCAN, k-means, ARI, silhouette
//! - [`groupinfer`]: gradient-space and feature-space group inference
//! - [`robusttrain`]: group-DRO training and worst-group evaluation
//! - [`pipeline`]: config-driven orchestration used by the CLI

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod gradspace;
pub mod groupinfer;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod robusttrain;

pub use error::{Error, Result};
