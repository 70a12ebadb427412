//! Activity recognition from IMU windows with calibrated uncertainty.
//!
//! The pipeline: preprocessed windows ([`data`]) are mapped by a variational,
//! metric-trained encoder ([`encoder`]) to diagonal-Gaussian embeddings, a
//! Kalman filter ([`tracker`]) smooths those distributions over time, and a
//! Bayesian fully-connected classifier ([`bnn`]) turns them into class
//! probabilities with predictive spread and an out-of-distribution flag.
//! [`explain`] attributes classifier outputs to embedding dimensions with
//! KernelSHAP and uses the attributions to prune the classifier.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar to `f64`, which is what the CLI
//! uses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bnn;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod linalg;
pub mod metrics;
pub mod nncore;
pub mod rng;
mod scalar;
pub mod tracker;

pub use error::{HarError, Result};
pub use scalar::Scalar;

pub type ImuWindowF64 = data::ImuWindow<f64>;
pub type ImuSeriesF64 = data::ImuSeries<f64>;
pub type DatasetSplitF64 = data::DatasetSplit<f64>;
pub type EmbeddingF64 = encoder::EmbeddingDistribution<f64>;
pub type EncoderF64 = encoder::EncoderModel<f64>;
pub type TrackStateF64 = tracker::TrackState<f64>;
pub type FcBnnF64 = bnn::FcBnnModel<f64>;
pub type PredictiveF64 = bnn::PredictiveResult<f64>;
pub type ShapExplanationF64 = explain::ShapExplanation<f64>;
pub type MatrixF64 = linalg::Matrix<f64>;
