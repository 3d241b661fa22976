use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

fn all_finite(t: &Tensor) -> Result<bool> {
    let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub(crate) fn expect_dims(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.dims() != expected {
        return Err(Error::shape(what, expected, t.dims()));
    }
    Ok(())
}

/// Per-frame latents of one clip, `[F, C, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentClip {
    pub data: Tensor,
    pub frame_rate: f64,
}

impl LatentClip {
    pub fn new(data: Tensor, frame_rate: f64) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape("latent clip", &[0, 0, 0, 0], data.dims()));
        }
        if !all_finite(&data)? {
            return Err(Error::Format("latent clip contains non-finite values".into()));
        }
        Ok(Self { data, frame_rate })
    }

    /// Checks the clip against a config's `[F, C, h, w]`.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        expect_dims(
            "latent clip",
            &self.data,
            &[cfg.clip_len, cfg.latent_channels, cfg.latent_height, cfg.latent_width],
        )
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Drop and mask switches for one denoising call.
///
/// Masking keeps a path but feeds it zeros; dropping removes the path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConditionFlags {
    /// Reference features leave spatial attention and motion-frame features
    /// leave temporal attention.
    pub drop_ref: bool,
    pub mask_motion_frames: bool,
    pub mask_audio: bool,
    pub mask_motion_latents: bool,
}

/// All conditioning inputs for one denoising call.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `[C, h, w]`
    pub ref_latent: Tensor,
    /// Raw motion frames `[M, C, h, w]`, index 0 closest to the current clip.
    pub motion_frames: Tensor,
    /// `[F, 5, audio_feature_dim]`
    pub audio_embed: Tensor,
    pub head_move_var: f64,
    pub expr_var: f64,
    pub flags: ConditionFlags,
    /// `[M]`; false marks frames not generated yet.
    pub motion_frame_validity: Vec<bool>,
}

impl ConditionBundle {
    /// Builds a bundle, zeroing any motion frame marked invalid.
    pub fn new(
        ref_latent: Tensor,
        motion_frames: Tensor,
        audio_embed: Tensor,
        motion_frame_validity: Vec<bool>,
    ) -> Result<Self> {
        let motion_frames = zero_invalid_frames(&motion_frames, &motion_frame_validity)?;
        Ok(Self {
            ref_latent,
            motion_frames,
            audio_embed,
            head_move_var: 0.0,
            expr_var: 0.0,
            flags: ConditionFlags::default(),
            motion_frame_validity,
        })
    }

    /// Bundle with zero reference, empty motion buffer and silent audio.
    pub fn empty(cfg: &ModelConfig, device: &Device) -> Result<Self> {
        let (c, h, w) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width);
        Self::new(
            Tensor::zeros((c, h, w), DType::F64, device)?,
            Tensor::zeros((cfg.motion_frame_len, c, h, w), DType::F64, device)?,
            Tensor::zeros((cfg.clip_len, 5, cfg.audio_feature_dim), DType::F64, device)?,
            vec![false; cfg.motion_frame_len],
        )
    }

    pub fn with_flags(mut self, flags: ConditionFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        let (c, h, w) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width);
        expect_dims("reference latent", &self.ref_latent, &[c, h, w])?;
        expect_dims("motion frames", &self.motion_frames, &[cfg.motion_frame_len, c, h, w])?;
        let f = self.audio_embed.dims().first().copied().unwrap_or(0);
        expect_dims("audio embedding", &self.audio_embed, &[f, 5, cfg.audio_feature_dim])?;
        if self.motion_frame_validity.len() != cfg.motion_frame_len {
            return Err(Error::shape(
                "motion frame validity",
                &[cfg.motion_frame_len],
                &[self.motion_frame_validity.len()],
            ));
        }
        if !(self.head_move_var >= 0.0 && self.expr_var >= 0.0) {
            return Err(Error::Format("motion variances must be nonnegative".into()));
        }
        Ok(())
    }
}

pub(crate) fn zero_invalid_frames(frames: &Tensor, validity: &[bool]) -> Result<Tensor> {
    let n = frames.dims().first().copied().unwrap_or(0);
    if validity.len() != n {
        return Err(Error::shape("motion frame validity", &[n], &[validity.len()]));
    }
    if validity.iter().all(|v| *v) {
        return Ok(frames.clone());
    }
    let mask: Vec<f64> = validity.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut shape = vec![1usize; frames.rank()];
    shape[0] = n;
    let mask = Tensor::from_vec(mask, shape, frames.device())?;
    Ok(frames.broadcast_mul(&mask)?)
}
