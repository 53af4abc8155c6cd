//! Co-salient object detection with group affinity, group collaboration and
//! confidence enhancement, trained on pairs of image groups.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix the common choices.

// Numeric kernels index several buffers in lockstep, and `!(x > 0.0)` is
// the deliberate way to reject NaN along with non-positive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cem;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gam;
pub mod gcm;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use types::{Consensus, FeatureStack, GroupBatch, Image, ImageGroup, SaliencyMaps};

pub type Net32 = network::CoSodNet<f32>;
pub type Net64 = network::CoSodNet<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
