//! Diffusion posterior sampling with raydrop-aware masked guidance for
//! translating simulated LiDAR range images into realistic ones.
//!
//! The pipeline: a [`model::ScoreModel`] prior over normalized range and
//! reflectance images, guided by the observed simulated range through
//! [`guidance::masked_guidance`], sampled with [`sampler::drum_translate`].

pub mod error;
pub mod guidance;
pub mod lidar;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, JacobianMode, MaskMode, MeasurementOperator, RaydropMask};
pub use lidar::{PointCloud, RangeImage, SensorIntrinsics};
pub use model::{GaussianPrior, NeuralDenoiser, ScoreModel};
pub use sampler::{drum_translate, SamplerConfig, TranslationResult};
pub use schedule::{NoiseSchedule, TimePoint};
pub use tensor::Tensor;
