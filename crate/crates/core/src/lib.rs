//! Unsupervised instance-discrimination embeddings for image chips, with
//! weighted-KNN evaluation, similarity search, outlier detection and class
//! hierarchy learning on top.

// `Real` may be f64, which turns its conversions into no-op casts.
#![allow(clippy::unnecessary_cast)]

pub mod bank;
pub mod baseline;
pub mod data;
mod error;
pub mod hierarchy;
pub mod kdtree;
pub mod knn;
pub mod models;
pub mod outliers;
pub mod pca;
pub mod retrieval;
pub mod seed;
pub mod train;
pub mod ufl;

pub use error::{Error, Result};
pub use ufl_autodiff::{Real, Tensor};

/// Index of a class, `0..C`.
pub type ClassId = usize;
