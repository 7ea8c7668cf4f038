//! Camera + LiDAR perception and navigation pipeline.
//!
//! Dual-stream feature extraction (residual CNN with reduced-head attention for
//! images, dynamic-sampling point network for clouds), reliability-gated
//! fusion, recurrent temporal modeling and a waypoint / ego-motion head, with
//! the numeric substrate, KITTI-format ingestion, a synthetic scenario
//! simulator and the evaluation metrics needed to train and test it.
//!
//! The numeric core and the model are generic over [`Scalar`] (`f32`/`f64`);
//! the aliases below fix the 64-bit instantiation used throughout the tools.

pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod scalar;
pub mod sim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numeric::Tensor<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Graph64 = numeric::Graph<f64>;
pub type ParamRegistry64 = numeric::ParamRegistry<f64>;
pub type AdamState64 = numeric::AdamState<f64>;
pub type ModelState64 = model::ModelState<f64>;
