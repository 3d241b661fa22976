//! The noise-prediction network.
//!
//! Each block runs, after its residual conv: spatial attention with
//! reference injection, inter-clip temporal attention over
//! `[motion frames ; current clip]`, additive audio cross-attention and
//! intra-clip temporal attention over the current clip only. Stage-1 models
//! carry the spatial layer only.

use candle_core::{Tensor, D};

use crate::config::{BlockOrder, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{silu, Attention, Conv2d, GroupNorm, Init, LayerNorm, ParamPath};
use crate::reference::{inject_spatial, ReferenceFeatureCache, SpatialAttention};
use crate::types::ConditionFlags;
use crate::unet::{from_tokens, to_tokens, Trunk};

/// Learned position/type embeddings for inter-clip attention.
#[derive(Debug, Clone)]
pub struct TemporalEmbedding {
    /// `[slots, D]`
    pub mf_embed: Tensor,
    /// `[F, D]`
    pub noisy_embed: Tensor,
}

/// Time-axis self-attention over motion-frame features followed by the
/// current clip's features; only the clip positions are returned.
#[derive(Debug, Clone)]
pub struct InterClipTemporal {
    pub norm: LayerNorm,
    pub attn: Attention,
    pub embed: TemporalEmbedding,
}

impl InterClipTemporal {
    pub fn new(p: &ParamPath, dim: usize, heads: usize, slots: usize, clip_len: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), dim)?,
            attn: Attention::new(&p.pp("attn"), dim, dim, heads)?,
            embed: TemporalEmbedding {
                mf_embed: p.get("mf_embed", &[slots, dim], Init::Normal { std: 0.02 })?,
                noisy_embed: p.get("noisy_embed", &[clip_len, dim], Init::Normal { std: 0.02 })?,
            },
        })
    }

    /// `noisy`: `[F, T, D]`; `mf`: `[slots, T, D]` or `None` when motion
    /// frames are dropped. `mf_keep[i] = 0` zeroes slot `i` (masked or not
    /// generated yet) while keeping it in the sequence.
    pub fn forward(&self, noisy: &Tensor, mf: Option<&Tensor>, mf_keep: Option<&[f64]>) -> Result<Tensor> {
        let (f, t, d) = noisy.dims3()?;
        if self.embed.noisy_embed.dims() != [f, d] {
            return Err(Error::shape(
                "inter-clip noisy features",
                self.embed.noisy_embed.dims(),
                &[f, t, d],
            ));
        }
        let x = noisy.transpose(0, 1)?.broadcast_add(&self.embed.noisy_embed)?;
        let seq = match mf {
            Some(mf) => {
                let slots = self.embed.mf_embed.dims()[0];
                if mf.dims() != [slots, t, d] {
                    return Err(Error::shape("inter-clip motion features", &[slots, t, d], mf.dims()));
                }
                let mut m = mf.clone();
                if let Some(keep) = mf_keep {
                    if keep.len() != slots {
                        return Err(Error::shape("motion slot mask", &[slots], &[keep.len()]));
                    }
                    let keep = Tensor::from_slice(keep, (slots, 1, 1), mf.device())?;
                    m = m.broadcast_mul(&keep)?;
                }
                let m = m.transpose(0, 1)?.broadcast_add(&self.embed.mf_embed)?;
                Tensor::cat(&[&m, &x], 1)?
            }
            None => x,
        };
        let total = seq.dims()[1];
        let normed = self.norm.forward(&seq)?;
        let q = normed.narrow(1, total - f, f)?;
        let out = self.attn.forward(&q, &normed)?;
        Ok((noisy + out.transpose(0, 1)?)?)
    }
}

/// Time-axis self-attention over the current clip's frames.
#[derive(Debug, Clone)]
pub struct IntraClipTemporal {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl IntraClipTemporal {
    pub fn new(p: &ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), dim)?,
            attn: Attention::new(&p.pp("attn"), dim, dim, heads)?,
        })
    }

    /// `noisy`: `[F, T, D]`.
    pub fn forward(&self, noisy: &Tensor) -> Result<Tensor> {
        let x = noisy.transpose(0, 1)?.contiguous()?;
        let normed = self.norm.forward(&x)?;
        let out = self.attn.forward(&normed, &normed)?;
        Ok((noisy + out.transpose(0, 1)?)?)
    }
}

/// Per-frame cross-attention from clip tokens to that frame's 5-token audio
/// window, added to the input.
#[derive(Debug, Clone)]
pub struct AudioCrossAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
    audio_dim: usize,
}

impl AudioCrossAttention {
    pub fn new(p: &ParamPath, dim: usize, audio_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), dim)?,
            attn: Attention::new(&p.pp("attn"), dim, audio_dim, heads)?,
            audio_dim,
        })
    }

    /// `noisy`: `[F, T, D]`, `audio`: `[F, 5, A]`.
    pub fn forward(&self, noisy: &Tensor, audio: &Tensor, mask_audio: bool) -> Result<Tensor> {
        let f = noisy.dims()[0];
        if audio.rank() != 3 || audio.dims()[0] != f || audio.dims()[2] != self.audio_dim {
            return Err(Error::shape("audio embedding", &[f, 5, self.audio_dim], audio.dims()));
        }
        let context = if mask_audio { audio.zeros_like()? } else { audio.clone() };
        let normed = self.norm.forward(noisy)?;
        Ok((noisy + self.attn.forward(&normed, &context)?)?)
    }
}

#[derive(Debug, Clone)]
struct TemporalStack {
    inter: InterClipTemporal,
    audio: AudioCrossAttention,
    intra: IntraClipTemporal,
}

#[derive(Debug, Clone)]
struct DenoiserBlock {
    spatial: SpatialAttention,
    temporal: Option<TemporalStack>,
}

/// Everything the denoiser reads besides `z_t` and `t`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInputs<'a> {
    pub cache: Option<&'a ReferenceFeatureCache>,
    /// `[F, 5, A]`
    pub audio: &'a Tensor,
    pub flags: ConditionFlags,
    /// Per abstracted motion slot: false for frames not generated yet.
    pub mf_slot_validity: &'a [bool],
    /// `[time_embed_dim]`, added to the timestep embedding.
    pub motion_latent: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    trunk: Trunk,
    blocks: Vec<DenoiserBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    block_order: BlockOrder,
    temporal: bool,
}

impl Denoiser {
    /// `temporal = false` builds the stage-1 network (spatial layers only).
    pub fn new(p: &ParamPath, cfg: &ModelConfig, temporal: bool) -> Result<Self> {
        let ch = &cfg.unet_channel_schedule;
        let trunk = Trunk::new(p, cfg.latent_channels, ch, cfg.time_embed_dim)?;
        let heads = cfg.attention_heads;
        let blocks = trunk
            .layout
            .iter()
            .map(|b| {
                let bp = p.pp(&b.id);
                let temporal = if temporal {
                    Some(TemporalStack {
                        inter: InterClipTemporal::new(
                            &bp.pp("inter_temporal"),
                            b.channels,
                            heads,
                            cfg.abstracted_motion_len(),
                            cfg.clip_len,
                        )?,
                        audio: AudioCrossAttention::new(
                            &bp.pp("audio_attn"),
                            b.channels,
                            cfg.audio_feature_dim,
                            heads,
                        )?,
                        intra: IntraClipTemporal::new(&bp.pp("intra_temporal"), b.channels, heads)?,
                    })
                } else {
                    None
                };
                Ok(DenoiserBlock {
                    spatial: SpatialAttention::new(&bp.pp("spatial"), b.channels, heads)?,
                    temporal,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm_out: GroupNorm::new(&p.pp("norm_out"), ch[0])?,
            conv_out: Conv2d::new(&p.pp("conv_out"), ch[0], cfg.latent_channels, 3, 1)?,
            trunk,
            blocks,
            block_order: cfg.block_order,
            temporal,
        })
    }

    pub fn has_temporal(&self) -> bool {
        self.temporal
    }

    pub fn time_embedding(&self, t: f64) -> Result<Tensor> {
        self.trunk.time_embedding(t)
    }

    /// Predicts the noise in `z_t` (`[F, C, h, w]`).
    pub fn forward(&self, z_t: &Tensor, t: f64, inputs: &DenoiseInputs<'_>) -> Result<Tensor> {
        let mut temb = self.trunk.time_embedding(t)?;
        if let (Some(ml), false) = (inputs.motion_latent, inputs.flags.mask_motion_latents) {
            if ml.dims() != temb.dims() {
                return Err(Error::shape("motion latent", temb.dims(), ml.dims()));
            }
            temb = (temb + ml)?;
        }
        let flags = inputs.flags;
        let use_ref = !flags.drop_ref;
        let keep: Vec<f64> = inputs
            .mf_slot_validity
            .iter()
            .map(|&v| if v && !flags.mask_motion_frames { 1.0 } else { 0.0 })
            .collect();

        let h = self.trunk.run(z_t, &temb, |idx, spec, hidden| {
            let (_, _, hh, ww) = hidden.dims4()?;
            let block = &self.blocks[idx];
            let mut x = to_tokens(&hidden)?;
            x = inject_spatial(&block.spatial, &x, &spec.id, inputs.cache, flags.drop_ref)?;
            if let Some(tmp) = &block.temporal {
                let mf = if use_ref {
                    let cache = inputs.cache.ok_or_else(|| Error::MissingCacheEntry(spec.id.clone()))?;
                    let feats = cache.get(&spec.id)?.mf_feats.as_ref();
                    Some(feats.ok_or_else(|| Error::MissingCacheEntry(format!("{}.mf_feats", spec.id)))?)
                } else {
                    None
                };
                x = tmp.inter.forward(&x, mf, Some(&keep))?;
                x = match self.block_order {
                    BlockOrder::AudioThenIntra => {
                        let x = tmp.audio.forward(&x, inputs.audio, flags.mask_audio)?;
                        tmp.intra.forward(&x)?
                    }
                    BlockOrder::IntraThenAudio => {
                        let x = tmp.intra.forward(&x)?;
                        tmp.audio.forward(&x, inputs.audio, flags.mask_audio)?
                    }
                };
            }
            from_tokens(&x, hh, ww)
        })?;
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}

/// Mean squared error between two tensors of equal shape.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("mse operands", a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.flatten_all()?.mean(D::Minus1)?)
}
