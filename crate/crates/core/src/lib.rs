// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod estimation;
pub mod expert;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod scalar;

pub use channel::{ChannelState, PhaseVector, SystemConfig};
pub use denoiser::{Denoiser, DenoiserDims};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use expert::{ExpertDataset, GaConfig};
pub use harness::ExperimentConfig;

pub type ChannelStateF64 = ChannelState<f64>;
pub type ChannelStateF32 = ChannelState<f32>;
pub type PhaseVectorF64 = PhaseVector<f64>;
pub type PhaseVectorF32 = PhaseVector<f32>;
pub type DenoiserF64 = Denoiser<f64>;
pub type DenoiserF32 = Denoiser<f32>;
pub type NoiseScheduleF64 = NoiseSchedule<f64>;
pub type NoiseScheduleF32 = NoiseSchedule<f32>;
