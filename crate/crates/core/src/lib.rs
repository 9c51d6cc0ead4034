//! Residual flow matching for predicting cryoablation iceball growth on
//! volumetric CT, with a diffusion baseline, synthetic phantom data and
//! evaluation metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod field;
pub mod metrics;
pub mod flow;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod report;
pub mod sampler;
pub mod train;
pub mod volume;
pub mod vvol;

pub use error::{Error, Result};
pub use field::Field;
pub use flow::{Conditioning, FlowState, PatchPair, TrainingPair, VelocityField};
pub use diffusion::{Denoiser, NoiseSchedule};
pub use metrics::MetricsRecord;
pub use model::{Example, ModelConfig, OptimizerState, VelocityModel};
pub use sampler::{IntegrationSpec, Method, Prediction};
pub use volume::{Dims, HuWindow, Patch, Rotation, Sample, Stage, Unit, Volume};
