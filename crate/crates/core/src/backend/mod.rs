//! Denoising backbone adapter: DDIM stepping and inversion, text conditioning,
//! latent codecs, and a small randomly initialized fixture backbone.

pub mod adapter;
pub mod codec;
pub mod ddim;
pub mod text;
pub mod unet;
pub mod weights;

pub use adapter::{
    mse, BackboneId, Conditioning, InversionOptions, LatentState, LatentTrajectory, LoadOptions, ModelAdapter,
};
pub use ddim::{DdimSchedule, SamplerConfig, ScheduleId};
