//! Two-stage training driver.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{audio_embeddings, FeatureExtractor, LogMelExtractor};
use crate::checkpoint::Checkpoint;
use crate::config::{AbstractionStrategy, ModelConfig};
use crate::data::SynthDataset;
use crate::diffusion::{training_loss, TrainingSample};
use crate::dropout::{apply_dropout, sample_rng};
use crate::error::{Error, Result};
use crate::latent_codec::PatchCodec;
use crate::model::{AvatarModel, Stage};
use crate::motion::{expression_variance, head_movement_variance, KeypointSequence};
use crate::motion_latent::{sample_training_condition, ConditionTag, MotionCondition};
use crate::schedule::DiffusionSchedule;
use crate::tsm::build_schedule;
use crate::types::ConditionBundle;

/// A video encoded for training.
#[derive(Debug, Clone)]
pub struct TrainingVideo {
    /// `[N, C, h, w]`
    pub latents: Tensor,
    /// `[N, 5, A]`
    pub audio: Tensor,
    pub keypoints: KeypointSequence,
}

impl TrainingVideo {
    pub fn frames(&self) -> usize {
        self.latents.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub videos: Vec<TrainingVideo>,
}

/// Audio feature extractor for a config, projection seeded by `cfg.seed`.
pub fn extractor_for(cfg: &ModelConfig) -> LogMelExtractor {
    LogMelExtractor::new(cfg.mel_bands, cfg.audio_feature_dim, cfg.seed)
}

impl TrainingData {
    pub fn from_dataset(
        ds: &SynthDataset,
        cfg: &ModelConfig,
        extractor: &dyn FeatureExtractor,
        device: &Device,
    ) -> Result<Self> {
        let codec = PatchCodec::for_config(cfg)?;
        let mut videos = Vec::with_capacity(ds.videos.len());
        for v in &ds.videos {
            let frames = v
                .frames
                .iter()
                .map(|img| codec.encode_image(img, device))
                .collect::<Result<Vec<_>>>()?;
            if frames.is_empty() {
                continue;
            }
            let latents = Tensor::stack(&frames, 0)?;
            let audio = audio_embeddings(&v.audio, cfg.fps, extractor)?.embed;
            let n = frames.len();
            let a = audio.dims()[0];
            let audio = if a >= n {
                audio.narrow(0, 0, n)?
            } else {
                let idx: Vec<u32> = (0..n).map(|i| i.min(a - 1) as u32).collect();
                audio.index_select(&Tensor::new(idx.as_slice(), device)?, 0)?
            };
            videos.push(TrainingVideo {
                latents,
                audio,
                keypoints: v.keypoints.clone(),
            });
        }
        Ok(Self { videos })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            log_every: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropoutCounts {
    pub samples: usize,
    pub mask_audio: usize,
    pub mask_motion_latents: usize,
    pub drop_ref: usize,
    pub mask_motion_frames: usize,
}

impl DropoutCounts {
    pub fn rates(&self) -> [f64; 4] {
        let n = self.samples.max(1) as f64;
        [
            self.mask_audio as f64 / n,
            self.mask_motion_latents as f64 / n,
            self.drop_ref as f64 / n,
            self.mask_motion_frames as f64 / n,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub start_step: usize,
    pub losses: Vec<f64>,
    pub dropout: DropoutCounts,
    pub condition_tags: BTreeMap<String, usize>,
    pub config_hash: String,
}

impl TrainReport {
    fn window_mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn first_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[..n.min(self.losses.len())])
    }

    pub fn last_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }

    /// `1 - last_n_mean / first_n_mean`.
    pub fn relative_drop(&self, n: usize) -> f64 {
        1.0 - self.last_mean(n) / self.first_mean(n)
    }
}

const STAGE_SALT: [u64; 2] = [0x5151_0001, 0x5151_0002];

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ STAGE_SALT[stage.number() as usize - 1]
}

fn frames_needed(stage: Stage, cfg: &ModelConfig) -> usize {
    match stage {
        Stage::One => 1,
        Stage::Two => cfg.clip_len,
    }
}

fn build_sample(
    model: &AvatarModel,
    data: &TrainingData,
    rng: &mut ChaCha8Rng,
    counts: &mut DropoutCounts,
    tags: &mut BTreeMap<String, usize>,
) -> Result<TrainingSample> {
    let cfg = &model.cfg;
    let need = frames_needed(model.stage, cfg);
    let usable: Vec<&TrainingVideo> = data.videos.iter().filter(|v| v.frames() >= need).collect();
    if usable.is_empty() {
        return Err(Error::TooFewFrames { min: need, got: 0 });
    }
    let video = usable[rng.random_range(0..usable.len())];
    let n = video.frames();
    let start = rng.random_range(0..=n - need);
    let ref_idx = rng.random_range(0..n);
    let dev = video.latents.device();
    let z0 = video.latents.narrow(0, start, need)?;
    let ref_latent = video.latents.get(ref_idx)?;
    let audio = video.audio.narrow(0, start, need)?;

    let frame_shape = [cfg.latent_channels, cfg.latent_height, cfg.latent_width];
    let zero = Tensor::zeros(&frame_shape, DType::F64, dev)?;
    let mut raw = Vec::with_capacity(cfg.motion_frame_len);
    let mut validity = Vec::with_capacity(cfg.motion_frame_len);
    for j in 0..cfg.motion_frame_len {
        match (model.stage, start.checked_sub(j + 1)) {
            (Stage::Two, Some(i)) => {
                raw.push(video.latents.get(i)?);
                validity.push(true);
            }
            _ => {
                raw.push(zero.clone());
                validity.push(false);
            }
        }
    }
    let mut cond = ConditionBundle::new(ref_latent, Tensor::stack(&raw, 0)?, audio.clone(), validity)?;

    let (motion_condition, schedule) = if model.stage == Stage::Two {
        let window = video.keypoints.window(start, need);
        cond.head_move_var = head_movement_variance(&window)?;
        cond.expr_var = expression_variance(&window)?;
        let tag = sample_training_condition(rng, true);
        *tags.entry(tag.as_str().to_string()).or_default() += 1;
        let mc = match tag {
            ConditionTag::Audio => MotionCondition::Audio(audio),
            ConditionTag::HeadMove => MotionCondition::HeadMove(cond.head_move_var),
            ConditionTag::Expression => MotionCondition::Expression(cond.expr_var),
        };
        let schedule = if cfg.tsm_strategy == AbstractionStrategy::Random {
            Some(build_schedule(
                cfg.tsm_stride,
                cfg.tsm_expand_ratio,
                cfg.tsm_segments,
                cfg.motion_frame_len,
                cfg.tsm_strategy,
                Some(rng),
            )?)
        } else {
            None
        };
        (Some(mc), schedule)
    } else {
        (None, None)
    };

    let cond = apply_dropout(cond, rng, &cfg.dropout)?;
    counts.samples += 1;
    counts.mask_audio += cond.flags.mask_audio as usize;
    counts.mask_motion_latents += cond.flags.mask_motion_latents as usize;
    counts.drop_ref += cond.flags.drop_ref as usize;
    counts.mask_motion_frames += cond.flags.mask_motion_frames as usize;
    Ok(TrainingSample {
        z0,
        cond,
        motion_condition,
        schedule,
    })
}

/// Runs `opts.steps` optimizer steps starting at `start_step`.
///
/// Every draw for step `k` comes from streams keyed by `(seed, stage, k)`,
/// so resuming from a checkpoint replays the same data order.
pub fn train(model: &AvatarModel, data: &TrainingData, opts: &TrainOptions, start_step: usize) -> Result<TrainReport> {
    let cfg = &model.cfg;
    let schedule = DiffusionSchedule::from_config(cfg)?;
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.params.vars(), params)?;
    let seed = stage_seed(cfg.seed, model.stage);
    let mut report = TrainReport {
        stage: model.stage,
        start_step,
        losses: Vec::with_capacity(opts.steps),
        dropout: DropoutCounts::default(),
        condition_tags: BTreeMap::new(),
        config_hash: cfg.hash(),
    };
    for step in start_step..start_step + opts.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let mut rng = sample_rng(seed, (step * cfg.batch_size + b) as u64);
            batch.push(build_sample(
                model,
                data,
                &mut rng,
                &mut report.dropout,
                &mut report.condition_tags,
            )?);
        }
        let mut step_rng = sample_rng(seed.rotate_left(17), step as u64);
        let loss = training_loss(model, &batch, &schedule, &mut step_rng)?;
        let value: f64 = loss.to_scalar()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss = {value}"),
            });
        }
        opt.backward_step(&loss)?;
        report.losses.push(value);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            tracing::info!(stage = model.stage.number(), step = step + 1, loss = value, "train");
        }
    }
    Ok(report)
}

pub fn train_stage1(cfg: &ModelConfig, data: &TrainingData, opts: &TrainOptions) -> Result<(AvatarModel, TrainReport)> {
    let model = AvatarModel::init(cfg.clone(), Stage::One)?;
    let report = train(&model, data, opts, 0)?;
    Ok((model, report))
}

pub fn train_stage2(
    cfg: &ModelConfig,
    data: &TrainingData,
    stage1: &Checkpoint,
    opts: &TrainOptions,
) -> Result<(AvatarModel, TrainReport)> {
    let model = stage1.to_stage2_model(cfg, &Device::Cpu)?;
    let report = train(&model, data, opts, 0)?;
    Ok((model, report))
}

/// Checkpoint metadata key holding the number of completed steps.
pub const STEP_KEY: &str = "step";

pub fn checkpoint_with_step(model: &AvatarModel, step: usize) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert(STEP_KEY.to_string(), serde_json::json!(step));
    Checkpoint::from_model(model, meta)
}

/// Continues training from a checkpoint written by [`checkpoint_with_step`].
/// Optimizer moments restart from zero.
pub fn resume(ck: &Checkpoint, data: &TrainingData, opts: &TrainOptions) -> Result<(AvatarModel, TrainReport)> {
    let model = ck.to_model(&Device::Cpu)?;
    let start = ck.header.metadata.get(STEP_KEY).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let report = train(&model, data, opts, start)?;
    Ok((model, report))
}
