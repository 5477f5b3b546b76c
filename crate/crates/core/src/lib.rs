//! Stereo-temporal instrument segmentation: query-based segmentation with
//! disparity-guided feature propagation, tracklet set classification and a
//! location-agnostic patch classifier, plus a synthetic stereo-video dataset.

pub mod autodiff;
pub mod benchmark;
pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lacls;
pub mod metrics;
pub mod pipeline;
pub mod qbs;
pub mod scalar;
pub mod stscls;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type FeatureMap32 = geometry::FeatureMap<f32>;
pub type FeatureMap64 = geometry::FeatureMap<f64>;
