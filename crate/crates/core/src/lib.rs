//! Audio-driven portrait video diffusion: temporal segment abstraction of
//! motion frames, a reference network, a temporally conditioned denoiser,
//! audio-to-motion-latent conditioning and a DDIM sampler with three-way
//! classifier-free guidance.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod dropout;
pub mod error;
pub mod infer;
pub mod latent_codec;
pub mod model;
pub mod motion;
pub mod motion_latent;
pub mod nn;
pub mod reference;
pub mod schedule;
pub mod train;
pub mod tsm;
pub mod types;
pub mod unet;

pub use config::{AbstractionStrategy, BlockOrder, DropoutRates, GuidanceScales, ModelConfig};
pub use error::{ConfigViolation, Error, Result};
pub use model::{AvatarModel, Stage};
pub use schedule::DiffusionSchedule;
pub use tsm::{build_schedule, SegmentSchedule};
pub use types::{ConditionBundle, ConditionFlags, LatentClip};
