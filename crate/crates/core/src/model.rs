use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::denoiser::{DenoiseInputs, Denoiser};
use crate::error::{Error, Result};
use crate::motion_latent::{MotionCondition, MotionLatentBank};
use crate::nn::ParamStore;
use crate::reference::{ReferenceFeatureCache, ReferenceNet};
use crate::tsm::{abstract_motion_frames, schedule_for, SegmentSchedule};
use crate::types::{ConditionBundle, ConditionFlags};

/// Training stage a model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Single frames, reference conditioning only.
    #[serde(rename = "1")]
    One,
    /// Adds temporal layers, audio cross-attention and the motion-latent bank.
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }
}

/// Parameter-name prefixes that only exist in stage-2 models.
pub const STAGE2_GROUPS: [&str; 4] = ["inter_temporal", "intra_temporal", "audio_attn", "motion_bank"];

pub fn is_stage2_param(name: &str) -> bool {
    STAGE2_GROUPS.iter().any(|g| name.split('.').any(|part| part == *g))
}

/// Per-clip conditioning that does not change across denoising steps.
#[derive(Debug, Clone)]
pub struct PreparedConditions {
    pub cache: Option<ReferenceFeatureCache>,
    pub slot_validity: Vec<bool>,
    /// `[F, 5, A]`
    pub audio: Tensor,
    pub flags: ConditionFlags,
    pub motion_latent: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AvatarModel {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub params: ParamStore,
    pub reference: ReferenceNet,
    pub denoiser: Denoiser,
    pub motion_bank: Option<MotionLatentBank>,
    pub schedule: SegmentSchedule,
}

impl AvatarModel {
    /// Builds the networks on top of `params`, creating any parameter the
    /// store lacks (unless it is frozen).
    pub fn new(cfg: ModelConfig, stage: Stage, params: ParamStore) -> Result<Self> {
        let cfg = cfg.validate()?;
        let root = params.root();
        let latent = [cfg.latent_channels, cfg.latent_height, cfg.latent_width];
        let reference = ReferenceNet::new(
            &root.pp("reference"),
            latent,
            &cfg.unet_channel_schedule,
            cfg.time_embed_dim,
            cfg.attention_heads,
        )?;
        let temporal = stage == Stage::Two;
        let denoiser = Denoiser::new(&root.pp("denoiser"), &cfg, temporal)?;
        let motion_bank = if temporal {
            Some(MotionLatentBank::new(&root.pp("motion_bank"), &cfg)?)
        } else {
            None
        };
        let schedule = schedule_for(&cfg)?;
        Ok(Self {
            cfg,
            stage,
            params,
            reference,
            denoiser,
            motion_bank,
            schedule,
        })
    }

    /// Freshly initialized model with the config's seed.
    pub fn init(cfg: ModelConfig, stage: Stage) -> Result<Self> {
        let params = ParamStore::new(cfg.seed, &Device::Cpu);
        Self::new(cfg, stage, params)
    }

    pub fn device(&self) -> Device {
        self.params.device()
    }

    /// Motion latent for a condition; `None` for stage-1 models.
    pub fn motion_latent(&self, cond: &MotionCondition) -> Result<Option<Tensor>> {
        match &self.motion_bank {
            Some(bank) => Ok(Some(bank.to_motion_latent(cond)?)),
            None => Ok(None),
        }
    }

    /// Runs the reference network (unless the reference is dropped) and
    /// resolves per-slot motion-frame validity.
    pub fn prepare(
        &self,
        cond: &ConditionBundle,
        motion_condition: Option<&MotionCondition>,
        schedule: Option<&SegmentSchedule>,
    ) -> Result<PreparedConditions> {
        let schedule = schedule.unwrap_or(&self.schedule);
        let temporal = self.stage == Stage::Two;
        let cache = if cond.flags.drop_ref {
            None
        } else if temporal {
            let mf = abstract_motion_frames(&cond.motion_frames, schedule)?;
            Some(self.reference.extract(&cond.ref_latent, Some(&mf))?)
        } else {
            Some(self.reference.extract(&cond.ref_latent, None)?)
        };
        let motion_latent = match motion_condition {
            Some(mc) if !cond.flags.mask_motion_latents => self.motion_latent(mc)?,
            _ => None,
        };
        Ok(PreparedConditions {
            cache,
            slot_validity: schedule.slot_validity(&cond.motion_frame_validity),
            audio: cond.audio_embed.clone(),
            flags: cond.flags,
            motion_latent,
        })
    }

    /// Noise prediction from prepared conditions with explicit flags.
    pub fn denoise_prepared(
        &self,
        z_t: &Tensor,
        t: usize,
        prep: &PreparedConditions,
        flags: ConditionFlags,
    ) -> Result<Tensor> {
        if t >= self.cfg.noise_steps {
            return Err(Error::TOutOfRange {
                t,
                steps: self.cfg.noise_steps,
            });
        }
        let (c, h, w) = (self.cfg.latent_channels, self.cfg.latent_height, self.cfg.latent_width);
        let f = z_t.dims().first().copied().unwrap_or(0);
        if z_t.dims() != [f, c, h, w] || f == 0 {
            return Err(Error::shape("noisy latents", &[self.cfg.clip_len, c, h, w], z_t.dims()));
        }
        if !flags.drop_ref && prep.cache.is_none() {
            return Err(Error::MissingCacheEntry("reference features were not extracted".into()));
        }
        let inputs = DenoiseInputs {
            cache: if flags.drop_ref { None } else { prep.cache.as_ref() },
            audio: &prep.audio,
            flags,
            mf_slot_validity: &prep.slot_validity,
            motion_latent: prep.motion_latent.as_ref(),
        };
        self.denoiser.forward(z_t, t as f64, &inputs)
    }

    /// Predicted noise for `z_t` (`[F, C, h, w]`) at timestep `t`.
    ///
    /// `motion_latent` is added to the timestep embedding unless absent or
    /// masked by the bundle's flags.
    pub fn denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionBundle,
        motion_latent: Option<&Tensor>,
    ) -> Result<Tensor> {
        cond.validate_for(&self.cfg)?;
        let mut prep = self.prepare(cond, None, None)?;
        prep.motion_latent = motion_latent.cloned();
        self.denoise_prepared(z_t, t, &prep, cond.flags)
    }

    /// Names of parameters belonging to stage-2-only groups.
    pub fn stage2_param_names(&self) -> Vec<String> {
        self.params.names().into_iter().filter(|n| is_stage2_param(n)).collect()
    }
}
