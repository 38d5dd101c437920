//! Spatiotemporal style transfer: synthesizes videos whose spatial and
//! temporal feature statistics match a target video, by gradient descent on
//! the pixels of each frame.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autodiff;
pub mod color;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod interop;
pub mod metrics;
pub mod objective;
pub mod scalar;
pub mod spatial;
pub mod stps;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use video::{ColorSpace, Fps, Frame, VideoTensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type SpatialNetwork32 = spatial::SpatialNetwork<f32>;
pub type SpatialNetwork64 = spatial::SpatialNetwork<f64>;
pub type TemporalNetwork32 = temporal::TemporalNetwork<f32>;
pub type TemporalNetwork64 = temporal::TemporalNetwork<f64>;
pub type Models32<'a> = objective::Models<'a, f32>;
pub type Models64<'a> = objective::Models<'a, f64>;
