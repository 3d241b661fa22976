//! Forward noising, the epsilon-prediction loss, deterministic DDIM
//! sampling with three-pass guidance, and the autoregressive clip loop.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::GuidanceScales;
use crate::denoiser::mse;
use crate::error::{Error, Result};
use crate::model::{AvatarModel, PreparedConditions};
use crate::motion_latent::MotionCondition;
use crate::schedule::DiffusionSchedule;
use crate::tsm::SegmentSchedule;
use crate::types::{ConditionBundle, ConditionFlags};

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

/// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise", z0.dims(), eps.dims()));
    }
    let (a, b) = schedule.signal_noise(t)?;
    Ok(((z0 * a)? + (eps * b)?)?)
}

/// Inverse of [`add_noise`] given the noise.
pub fn predict_x0(z_t: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let (a, b) = schedule.signal_noise(t)?;
    Ok(((z_t - (eps * b)?)? / a)?)
}

/// `audio_ratio (e_audio - e_ref) + ref_ratio (e_ref - e_base) + e_base`.
pub fn cfg_combine(e_audio: &Tensor, e_ref: &Tensor, e_base: &Tensor, scales: GuidanceScales) -> Result<Tensor> {
    if e_audio.dims() != e_ref.dims() || e_ref.dims() != e_base.dims() {
        return Err(Error::shape(
            "guidance inputs",
            e_audio.dims(),
            if e_audio.dims() != e_ref.dims() {
                e_ref.dims()
            } else {
                e_base.dims()
            },
        ));
    }
    let audio_term = ((e_audio - e_ref)? * scales.audio_ratio)?;
    let ref_term = ((e_ref - e_base)? * scales.ref_ratio)?;
    Ok(((audio_term + ref_term)? + e_base)?)
}

/// Which conditions a guidance pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidancePass {
    /// All conditions.
    Audio,
    /// Audio (and the audio-derived motion latent) masked.
    Reference,
    /// Audio masked, reference and motion frames dropped.
    Base,
}

impl GuidancePass {
    pub fn flags(self, base: ConditionFlags) -> ConditionFlags {
        match self {
            Self::Audio => base,
            Self::Reference => ConditionFlags {
                mask_audio: true,
                mask_motion_latents: true,
                ..base
            },
            Self::Base => ConditionFlags {
                mask_audio: true,
                mask_motion_latents: true,
                drop_ref: true,
                ..base
            },
        }
    }
}

/// Anything that predicts noise for a guidance pass.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize, pass: GuidancePass) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize, GuidancePass) -> Result<Tensor>,
{
    fn predict(&self, z_t: &Tensor, t: usize, pass: GuidancePass) -> Result<Tensor> {
        self(z_t, t, pass)
    }
}

/// The full model with per-clip conditions prepared once.
pub struct ModelPredictor<'a> {
    pub model: &'a AvatarModel,
    pub prepared: &'a PreparedConditions,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, z_t: &Tensor, t: usize, pass: GuidancePass) -> Result<Tensor> {
        let flags = pass.flags(self.prepared.flags);
        // Sampling never backpropagates; dropping the graph bounds memory.
        Ok(self.model.denoise_prepared(z_t, t, self.prepared, flags)?.detach())
    }
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
/// With `clip`, the predicted clean latent is clamped to `[-clip, clip]`
/// and the noise re-derived from it.
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &DiffusionSchedule,
    clip: Option<f64>,
) -> Result<Tensor> {
    let mut x0 = predict_x0(z_t, t, eps, schedule)?;
    let mut eps = eps.clone();
    if let Some(c) = clip {
        x0 = x0.clamp(-c, c)?;
        let (a, b) = schedule.signal_noise(t)?;
        eps = ((z_t - (&x0 * a)?)? / b)?;
    }
    let a_prev = match t_prev {
        Some(tp) => {
            schedule.check_t(tp)?;
            schedule.alpha_cumprod[tp]
        }
        None => return Ok(x0),
    };
    Ok(((x0 * a_prev.sqrt())? + (eps * (1.0 - a_prev).sqrt())?)?)
}

/// DDIM (eta = 0) from a given start `z_T`, three guidance passes per step.
pub fn ddim_sample_from<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_start: Tensor,
    schedule: &DiffusionSchedule,
    steps: usize,
    scales: GuidanceScales,
    clip: Option<f64>,
) -> Result<Tensor> {
    let ts = schedule.sampling_timesteps(steps);
    let mut z = z_start;
    for (i, &t) in ts.iter().enumerate() {
        let e_audio = predictor.predict(&z, t, GuidancePass::Audio)?;
        let e_ref = predictor.predict(&z, t, GuidancePass::Reference)?;
        let e_base = predictor.predict(&z, t, GuidancePass::Base)?;
        let eps = cfg_combine(&e_audio, &e_ref, &e_base, scales)?;
        z = ddim_step(&z, &eps, t, ts.get(i + 1).copied(), schedule, clip)?.detach();
    }
    Ok(z)
}

/// DDIM (eta = 0) from seeded Gaussian noise of `shape`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    shape: &[usize],
    schedule: &DiffusionSchedule,
    steps: usize,
    scales: GuidanceScales,
    clip: Option<f64>,
    seed: u64,
    device: &Device,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gaussian(shape, &mut rng, device)?;
    ddim_sample_from(predictor, z, schedule, steps, scales, clip)
}

/// One post-dropout training example.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Clean latents `[F, C, h, w]`.
    pub z0: Tensor,
    pub cond: ConditionBundle,
    pub motion_condition: Option<MotionCondition>,
    /// Optional per-sample motion-frame schedule (random abstraction).
    pub schedule: Option<SegmentSchedule>,
}

/// Mean over the batch of per-element `||eps - eps_theta(z_t, t, c)||^2`,
/// with `t` uniform in `[0, T)` and `eps` standard normal, both from `rng`.
pub fn training_loss<R: Rng + ?Sized>(
    model: &AvatarModel,
    batch: &[TrainingSample],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Format("empty training batch".into()));
    }
    let dev = model.device();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let t = rng.random_range(0..schedule.len());
        let eps = gaussian(s.z0.dims(), rng, &dev)?;
        let z_t = add_noise(&s.z0, t, &eps, schedule)?;
        let prep = model.prepare(&s.cond, s.motion_condition.as_ref(), s.schedule.as_ref())?;
        let pred = model.denoise_prepared(&z_t, t, &prep, s.cond.flags)?;
        losses.push(mse(&pred, &eps)?);
    }
    Ok((Tensor::stack(&losses, 0)?.mean_all())?)
}

/// Reference latent and per-frame audio windows for a long generation.
#[derive(Debug, Clone)]
pub struct LongVideoConditions {
    /// `[C, h, w]`
    pub ref_latent: Tensor,
    /// `[n_frames, 5, A]`; clips past the end reuse the last window.
    pub audio_windows: Tensor,
}

impl LongVideoConditions {
    /// Audio windows for clip `k` of length `clip_len`.
    pub fn clip_audio(&self, k: usize, clip_len: usize) -> Result<Tensor> {
        let n = self.audio_windows.dims()[0];
        if n == 0 {
            return Err(Error::EmptyAudio);
        }
        let idx: Vec<u32> = (k * clip_len..(k + 1) * clip_len)
            .map(|i| i.min(n - 1) as u32)
            .collect();
        let idx = Tensor::new(idx.as_slice(), self.audio_windows.device())?;
        Ok(self.audio_windows.index_select(&idx, 0)?)
    }
}

/// Seed for clip `k` of a run seeded with `seed`.
pub fn clip_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.random()
}

/// Raw motion frames for the next clip: the newest `M` generated frames,
/// newest first, zero and invalid where nothing was generated yet.
pub fn motion_buffer(
    generated: &[Tensor],
    motion_len: usize,
    frame_shape: &[usize],
    device: &Device,
) -> Result<(Tensor, Vec<bool>)> {
    let zero = Tensor::zeros(frame_shape, candle_core::DType::F64, device)?;
    let mut frames = Vec::with_capacity(motion_len);
    let mut validity = Vec::with_capacity(motion_len);
    for j in 0..motion_len {
        match generated.len().checked_sub(j + 1).map(|i| &generated[i]) {
            Some(f) => {
                frames.push(f.clone());
                validity.push(true);
            }
            None => {
                frames.push(zero.clone());
                validity.push(false);
            }
        }
    }
    Ok((Tensor::stack(&frames, 0)?, validity))
}

/// Generates `n_clips` consecutive clips, each conditioned on the frames
/// generated before it.
pub fn generate_long_video(
    model: &AvatarModel,
    n_clips: usize,
    source: &LongVideoConditions,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let cfg = &model.cfg;
    let dev = model.device();
    let schedule = DiffusionSchedule::from_config(cfg)?;
    let frame_shape = [cfg.latent_channels, cfg.latent_height, cfg.latent_width];
    let clip_shape = [cfg.clip_len, cfg.latent_channels, cfg.latent_height, cfg.latent_width];
    let mut generated: Vec<Tensor> = Vec::new();
    let mut clips = Vec::with_capacity(n_clips);
    for k in 0..n_clips {
        let (raw, validity) = motion_buffer(&generated, cfg.motion_frame_len, &frame_shape, &dev)?;
        let audio = source.clip_audio(k, cfg.clip_len)?;
        let cond = ConditionBundle::new(source.ref_latent.clone(), raw, audio.clone(), validity)?;
        cond.validate_for(cfg)?;
        let prepared = model.prepare(&cond, Some(&MotionCondition::Audio(audio)), None)?;
        let predictor = ModelPredictor {
            model,
            prepared: &prepared,
        };
        let clip = ddim_sample(
            &predictor,
            &clip_shape,
            &schedule,
            cfg.ddim_steps,
            cfg.guidance,
            cfg.sample_clip,
            clip_seed(seed, k),
            &dev,
        )?;
        for f in 0..cfg.clip_len {
            generated.push(clip.get(f)?);
        }
        tracing::debug!(clip = k, "generated clip");
        clips.push(clip);
    }
    Ok(clips)
}
