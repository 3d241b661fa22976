//! Convolutional U-Net trunk shared by the reference network and the
//! denoiser. Each of them plugs its own attention stack in after every
//! residual block.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{silu, timestep_features, Conv2d, GroupNorm, Linear, ParamPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Down(usize),
    Mid,
    Up(usize),
}

/// One attention-bearing block of the U-Net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub id: String,
    pub kind: BlockKind,
    pub in_channels: usize,
    pub channels: usize,
}

/// Blocks in execution order: down levels, mid, up levels in reverse.
pub fn block_layout(channels: &[usize]) -> Vec<BlockSpec> {
    let levels = channels.len();
    let mut out = Vec::with_capacity(2 * levels + 1);
    for (i, &ch) in channels.iter().enumerate() {
        out.push(BlockSpec {
            id: format!("down{i}"),
            kind: BlockKind::Down(i),
            in_channels: if i == 0 { ch } else { channels[i - 1] },
            channels: ch,
        });
    }
    let last = channels[levels - 1];
    out.push(BlockSpec {
        id: "mid".into(),
        kind: BlockKind::Mid,
        in_channels: last,
        channels: last,
    });
    for i in (0..levels).rev() {
        out.push(BlockSpec {
            id: format!("up{i}"),
            kind: BlockKind::Up(i),
            in_channels: 2 * channels[i],
            channels: channels[i],
        });
    }
    out
}

pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, d) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, d, h, w))?)
}

fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let x = x
        .unsqueeze(3)?
        .broadcast_as((n, c, h, 2, w))?
        .reshape((n, c, 2 * h, w))?;
    Ok(x.unsqueeze(4)?
        .broadcast_as((n, c, 2 * h, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), in_ch)?,
            conv1: Conv2d::new(&p.pp("conv1"), in_ch, out_ch, 3, 1)?,
            temb_proj: Linear::new(&p.pp("time_emb_proj"), temb_dim, out_ch)?,
            norm2: GroupNorm::new(&p.pp("norm2"), out_ch)?,
            conv2: Conv2d::new(&p.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&p.pp("skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `x`: `[N, C, H, W]`, `temb`: `[temb_dim]` shared by all N frames.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.temb_proj.forward(&silu(temb)?)?;
        let c = t.dims()[0];
        let h = h.broadcast_add(&t.reshape((1, c, 1, 1))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct Trunk {
    pub layout: Vec<BlockSpec>,
    conv_in: Conv2d,
    time_lin1: Linear,
    time_lin2: Linear,
    res: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    time_base_dim: usize,
}

impl Trunk {
    pub fn new(p: &ParamPath, latent_channels: usize, channels: &[usize], temb_dim: usize) -> Result<Self> {
        let layout = block_layout(channels);
        let res = layout
            .iter()
            .map(|b| ResBlock::new(&p.pp(&b.id).pp("res"), b.in_channels, b.channels, temb_dim))
            .collect::<Result<Vec<_>>>()?;
        let levels = channels.len();
        let downs = (0..levels - 1)
            .map(|i| {
                Conv2d::new(
                    &p.pp(format!("down{i}")).pp("downsample"),
                    channels[i],
                    channels[i],
                    3,
                    2,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..levels - 1)
            .map(|i| {
                Conv2d::new(
                    &p.pp(format!("up{}", i + 1)).pp("upsample"),
                    channels[i + 1],
                    channels[i],
                    3,
                    1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let base = channels[0];
        Ok(Self {
            layout,
            conv_in: Conv2d::new(&p.pp("conv_in"), latent_channels, base, 3, 1)?,
            time_lin1: Linear::new(&p.pp("time_embedding.linear_1"), base, temb_dim)?,
            time_lin2: Linear::new(&p.pp("time_embedding.linear_2"), temb_dim, temb_dim)?,
            res,
            downs,
            ups,
            time_base_dim: base,
        })
    }

    /// Timestep embedding: sinusoidal features through a two-layer MLP.
    pub fn time_embedding(&self, t: f64) -> Result<Tensor> {
        let dev = self.time_lin1.weight.device();
        let f = timestep_features(t, self.time_base_dim, dev)?;
        self.time_lin2.forward(&silu(&self.time_lin1.forward(&f)?)?)
    }

    /// Runs the trunk, calling `block` with the residual-block output of
    /// every block and continuing with what it returns.
    pub fn run<F>(&self, x: &Tensor, temb: &Tensor, mut block: F) -> Result<Tensor>
    where
        F: FnMut(usize, &BlockSpec, Tensor) -> Result<Tensor>,
    {
        let mut h = self.conv_in.forward(x)?;
        let mut skips: Vec<Tensor> = Vec::new();
        for (idx, spec) in self.layout.iter().enumerate() {
            match spec.kind {
                BlockKind::Down(i) => {
                    h = block(idx, spec, self.res[idx].forward(&h, temb)?)?;
                    skips.push(h.clone());
                    if i < self.downs.len() {
                        h = self.downs[i].forward(&h)?;
                    }
                }
                BlockKind::Mid => {
                    h = block(idx, spec, self.res[idx].forward(&h, temb)?)?;
                }
                BlockKind::Up(i) => {
                    let skip = skips.pop().expect("one skip per level");
                    let x = Tensor::cat(&[&h, &skip], 1)?;
                    h = block(idx, spec, self.res[idx].forward(&x, temb)?)?;
                    if i > 0 {
                        h = self.ups[i - 1].forward(&upsample2x(&h)?)?;
                    }
                }
            }
        }
        Ok(h)
    }
}
