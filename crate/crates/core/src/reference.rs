//! Reference network and spatial reference injection.
//!
//! The reference network mirrors the denoiser's U-Net trunk (own weights,
//! no temporal or audio layers, timestep fixed at 0). At every block it
//! records the normalized tokens entering spatial self-attention; the
//! denoiser appends the reference frame's tokens to its own keys and values,
//! and feeds the motion frames' tokens to inter-clip temporal attention.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, ParamPath};
use crate::types::expect_dims;
use crate::unet::{from_tokens, to_tokens, Trunk};

/// Cached features for one block.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    /// `[tokens, D]`
    pub ref_feat: Tensor,
    /// `[slots, tokens, D]`; absent when no motion frames were given.
    pub mf_feats: Option<Tensor>,
}

/// Write-once map from block id to reference features.
#[derive(Debug, Clone, Default)]
pub struct ReferenceFeatureCache {
    pub blocks: BTreeMap<String, BlockFeatures>,
}

impl ReferenceFeatureCache {
    pub fn get(&self, block: &str) -> Result<&BlockFeatures> {
        self.blocks
            .get(block)
            .ok_or_else(|| Error::MissingCacheEntry(block.to_string()))
    }
}

/// Pre-norm spatial self-attention with optional reference tokens appended
/// to keys and values.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl SpatialAttention {
    pub fn new(p: &ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), dim)?,
            attn: Attention::new(&p.pp("attn"), dim, dim, heads)?,
        })
    }

    /// `x`: `[N, T, D]`, `ref_feat`: `[T', D]` shared by all N frames.
    /// Returns `[N, T, D]`; queries always come from `x` alone.
    pub fn forward(&self, x: &Tensor, ref_feat: Option<&Tensor>) -> Result<Tensor> {
        let normed = self.norm.forward(x)?;
        self.forward_normed(x, &normed, ref_feat)
    }

    fn forward_normed(&self, x: &Tensor, normed: &Tensor, ref_feat: Option<&Tensor>) -> Result<Tensor> {
        let context = match ref_feat {
            Some(r) => {
                let (n, _, d) = normed.dims3()?;
                if r.rank() != 2 || r.dims()[1] != d {
                    return Err(Error::shape("reference feature", &[r.dims()[0], d], r.dims()));
                }
                let r = r.unsqueeze(0)?.broadcast_as((n, r.dims()[0], d))?;
                Tensor::cat(&[normed, &r], 1)?
            }
            None => normed.clone(),
        };
        Ok((x + self.attn.forward(normed, &context)?)?)
    }
}

/// Spatial attention for one denoiser block, appending that block's cached
/// reference tokens unless `drop_ref` is set.
pub fn inject_spatial(
    layer: &SpatialAttention,
    block_feat: &Tensor,
    block_id: &str,
    cache: Option<&ReferenceFeatureCache>,
    drop_ref: bool,
) -> Result<Tensor> {
    if drop_ref {
        return layer.forward(block_feat, None);
    }
    let cache = cache.ok_or_else(|| Error::MissingCacheEntry(block_id.to_string()))?;
    layer.forward(block_feat, Some(&cache.get(block_id)?.ref_feat))
}

#[derive(Debug, Clone)]
pub struct ReferenceNet {
    trunk: Trunk,
    spatial: Vec<SpatialAttention>,
    latent_shape: [usize; 3],
}

impl ReferenceNet {
    pub fn new(
        p: &ParamPath,
        latent_shape: [usize; 3],
        channels: &[usize],
        temb_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let trunk = Trunk::new(p, latent_shape[0], channels, temb_dim)?;
        let spatial = trunk
            .layout
            .iter()
            .map(|b| SpatialAttention::new(&p.pp(&b.id).pp("spatial"), b.channels, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            trunk,
            spatial,
            latent_shape,
        })
    }

    /// Runs the reference latent `[C, h, w]` and abstracted motion frames
    /// `[slots, C, h, w]` through the network, one frame per batch entry.
    pub fn extract(&self, ref_latent: &Tensor, mf_latents: Option<&Tensor>) -> Result<ReferenceFeatureCache> {
        let [c, h, w] = self.latent_shape;
        expect_dims("reference latent", ref_latent, &[c, h, w])?;
        let mut frames = vec![ref_latent.unsqueeze(0)?];
        let slots = match mf_latents {
            Some(mf) => {
                let s = mf.dims().first().copied().unwrap_or(0);
                expect_dims("motion frame latents", mf, &[s, c, h, w])?;
                frames.push(mf.clone());
                Some(s)
            }
            None => None,
        };
        let x = Tensor::cat(&frames, 0)?;
        let temb = self.trunk.time_embedding(0.0)?;
        let mut cache = ReferenceFeatureCache::default();
        self.trunk.run(&x, &temb, |idx, spec, hidden| {
            let (_, _, hh, ww) = hidden.dims4()?;
            let tokens = to_tokens(&hidden)?;
            let layer = &self.spatial[idx];
            let normed = layer.norm.forward(&tokens)?;
            cache.blocks.insert(
                spec.id.clone(),
                BlockFeatures {
                    ref_feat: normed.get(0)?,
                    mf_feats: match slots {
                        Some(s) => Some(normed.narrow(0, 1, s)?),
                        None => None,
                    },
                },
            );
            let out = layer.forward_normed(&tokens, &normed, None)?;
            from_tokens(&out, hh, ww)
        })?;
        Ok(cache)
    }
}
