//! Model and experiment configuration.
//!
//! Configs are plain JSON. Parsing is strict: unknown keys are rejected, and
//! any key left out takes its value from the toy preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigViolation, Error, Result};

/// How each motion-frame segment is reduced to `stride` representative frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AbstractionStrategy {
    /// First frame of each bucket.
    #[default]
    Uniform,
    /// Average over each bucket.
    Mean,
    /// One frame drawn uniformly from each bucket.
    Random,
}

/// Order of the two layers that follow inter-clip temporal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    AudioThenIntra,
    IntraThenAudio,
}

/// How the `[F, 5, D]` audio windows are pooled into the single query token
/// of the motion-latent attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AudioPooling {
    #[default]
    Mean,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutRates {
    pub audio: f64,
    pub motion_latents: f64,
    pub ref_drop: f64,
    pub mf_mask: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            audio: 0.10,
            motion_latents: 0.10,
            ref_drop: 0.15,
            mf_mask: 0.40,
        }
    }
}

impl DropoutRates {
    pub const ZERO: Self = Self {
        audio: 0.0,
        motion_latents: 0.0,
        ref_drop: 0.0,
        mf_mask: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceScales {
    pub audio_ratio: f64,
    pub ref_ratio: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            audio_ratio: 5.0,
            ref_ratio: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frames generated per clip.
    pub clip_len: usize,
    /// Raw preceding frames kept in the motion buffer.
    pub motion_frame_len: usize,
    pub tsm_stride: usize,
    pub tsm_expand_ratio: usize,
    pub tsm_segments: usize,
    pub tsm_strategy: AbstractionStrategy,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub audio_feature_dim: usize,
    pub n_learnable_embeddings: usize,
    pub qkv_dim: usize,
    pub time_embed_dim: usize,
    pub unet_channel_schedule: Vec<usize>,
    pub attention_heads: usize,
    pub noise_steps: usize,
    pub seed: u64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub fps: f64,
    pub audio_sample_rate: u32,
    pub mel_bands: usize,
    pub block_order: BlockOrder,
    pub audio_pooling: AudioPooling,
    pub dropout: DropoutRates,
    pub guidance: GuidanceScales,
    pub ddim_steps: usize,
    /// Clamp for the predicted clean latent during sampling; `None` for
    /// unbounded latent spaces.
    #[serde(default)]
    pub sample_clip: Option<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small CPU-friendly preset that still exercises every code path.
    pub fn toy() -> Self {
        Self {
            clip_len: 4,
            motion_frame_len: 14,
            tsm_stride: 2,
            tsm_expand_ratio: 2,
            tsm_segments: 3,
            tsm_strategy: AbstractionStrategy::Uniform,
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            audio_feature_dim: 16,
            n_learnable_embeddings: 16,
            qkv_dim: 32,
            time_embed_dim: 64,
            unet_channel_schedule: vec![16, 32],
            attention_heads: 2,
            noise_steps: 1000,
            seed: 0,
            beta_start: 1e-4,
            beta_end: 2e-2,
            fps: 25.0,
            audio_sample_rate: 16_000,
            mel_bands: 64,
            block_order: BlockOrder::AudioThenIntra,
            audio_pooling: AudioPooling::Mean,
            dropout: DropoutRates::default(),
            guidance: GuidanceScales::default(),
            ddim_steps: 25,
            // The toy codec maps pixels onto [-1, 1].
            sample_clip: Some(1.0),
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 4,
        }
    }

    /// Full-scale hyperparameters: 12-frame clips, 124 motion frames
    /// abstracted to 20, SD-sized channels.
    pub fn full_scale() -> Self {
        Self {
            clip_len: 12,
            motion_frame_len: 124,
            tsm_stride: 4,
            tsm_expand_ratio: 2,
            tsm_segments: 5,
            latent_channels: 4,
            latent_height: 64,
            latent_width: 64,
            audio_feature_dim: 768,
            n_learnable_embeddings: 128,
            qkv_dim: 256,
            time_embed_dim: 1280,
            unet_channel_schedule: vec![320, 640, 1280, 1280],
            attention_heads: 8,
            sample_clip: None,
            learning_rate: 1e-5,
            batch_size: 24,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "full" | "full_scale" => Some(Self::full_scale()),
            _ => None,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Raw frames covered by all segments: `sum_i s * r^i`, saturating.
    pub fn segment_coverage(&self) -> usize {
        segment_coverage(self.tsm_stride, self.tsm_expand_ratio, self.tsm_segments)
    }

    /// Number of abstracted motion-frame slots fed to inter-clip attention.
    pub fn abstracted_motion_len(&self) -> usize {
        self.tsm_stride * self.tsm_segments
    }

    /// Returns the config unchanged iff every invariant holds; otherwise
    /// reports all violations at once.
    pub fn validate(self) -> Result<Self> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(violations))
        }
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let dims: [(&'static str, usize); 16] = [
            ("clip_len", self.clip_len),
            ("tsm_stride", self.tsm_stride),
            ("tsm_expand_ratio", self.tsm_expand_ratio),
            ("tsm_segments", self.tsm_segments),
            ("latent_channels", self.latent_channels),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("audio_feature_dim", self.audio_feature_dim),
            ("n_learnable_embeddings", self.n_learnable_embeddings),
            ("qkv_dim", self.qkv_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("attention_heads", self.attention_heads),
            ("noise_steps", self.noise_steps),
            ("mel_bands", self.mel_bands),
            ("ddim_steps", self.ddim_steps),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in dims {
            if v == 0 {
                out.push(ConfigViolation::NonPositiveDim { field });
            }
        }
        if self.unet_channel_schedule.is_empty() || self.unet_channel_schedule.contains(&0) {
            out.push(ConfigViolation::NonPositiveDim {
                field: "unet_channel_schedule",
            });
        }
        if self.audio_sample_rate == 0 {
            out.push(ConfigViolation::NonPositiveDim {
                field: "audio_sample_rate",
            });
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            out.push(ConfigViolation::NonPositiveDim { field: "fps" });
        }

        let covered = self.segment_coverage();
        if self.tsm_stride > 0 && self.tsm_segments > 0 && covered > self.motion_frame_len {
            out.push(ConfigViolation::ScheduleOverrun {
                covered,
                available: self.motion_frame_len,
            });
        }

        if self.attention_heads > 0 {
            for &ch in &self.unet_channel_schedule {
                if ch > 0 && ch % self.attention_heads != 0 {
                    out.push(ConfigViolation::Invalid {
                        field: "unet_channel_schedule",
                        reason: format!("channel width {ch} not divisible by {} heads", self.attention_heads),
                    });
                }
            }
        }
        let levels = self.unet_channel_schedule.len();
        if levels > 0 && self.latent_height > 0 && self.latent_width > 0 {
            let factor = 1usize << (levels - 1).min(30);
            if !self.latent_height.is_multiple_of(factor) || !self.latent_width.is_multiple_of(factor) {
                out.push(ConfigViolation::Invalid {
                    field: "latent_height",
                    reason: format!("latent size must be divisible by {factor} for {levels} levels"),
                });
            }
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            out.push(ConfigViolation::Invalid {
                field: "beta_start",
                reason: format!(
                    "need 0 < beta_start <= beta_end < 1, got {} / {}",
                    self.beta_start, self.beta_end
                ),
            });
        }
        if self.ddim_steps > self.noise_steps {
            out.push(ConfigViolation::Invalid {
                field: "ddim_steps",
                reason: format!("{} exceeds noise_steps {}", self.ddim_steps, self.noise_steps),
            });
        }
        if let Some(c) = self.sample_clip {
            if !(c > 0.0 && c.is_finite()) {
                out.push(ConfigViolation::Invalid {
                    field: "sample_clip",
                    reason: format!("{c} must be positive and finite"),
                });
            }
        }
        let rates = [
            ("dropout.audio", self.dropout.audio),
            ("dropout.motion_latents", self.dropout.motion_latents),
            ("dropout.ref_drop", self.dropout.ref_drop),
            ("dropout.mf_mask", self.dropout.mf_mask),
        ];
        for (field, p) in rates {
            if !(0.0..=1.0).contains(&p) {
                out.push(ConfigViolation::Invalid {
                    field,
                    reason: format!("probability {p} outside [0, 1]"),
                });
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(ConfigViolation::Invalid {
                field: "learning_rate",
                reason: "must be positive".into(),
            });
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

pub fn segment_coverage(stride: usize, ratio: usize, segments: usize) -> usize {
    let mut total = 0usize;
    let mut size = stride;
    for _ in 0..segments {
        total = total.saturating_add(size);
        size = size.saturating_mul(ratio);
    }
    total
}
