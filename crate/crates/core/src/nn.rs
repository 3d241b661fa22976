//! Minimal f64 building blocks on top of candle: a named, seeded parameter
//! store and the layers the networks are assembled from.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform {
        bound: f64,
    },
    Normal {
        std: f64,
    },
    /// Zero for output projections of added layers; uniform(1/sqrt(fan_in))
    /// when the store has zero-init disabled.
    ZeroOut {
        fan_in: usize,
    },
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    seed: u64,
    frozen: bool,
    zero_init_outputs: bool,
    device: Device,
}

/// Named trainable parameters. Each parameter's initial value depends only
/// on the store seed and its name, never on creation order.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("params", &inner.vars.len())
            .field("seed", &inner.seed)
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                seed,
                frozen: false,
                zero_init_outputs: true,
                device: device.clone(),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("param store poisoned")
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// A frozen store errors on missing parameters instead of creating them.
    pub fn set_frozen(&self, frozen: bool) {
        self.lock().frozen = frozen;
    }

    pub fn set_zero_init_outputs(&self, on: bool) {
        self.lock().zero_init_outputs = on;
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        if inner.frozen {
            return Err(Error::MissingParam(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(inner.seed, name));
        let uniform = |bound: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { bound } => uniform(bound, &mut rng),
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::ZeroOut { fan_in } => {
                if inner.zero_init_outputs {
                    vec![0.0; n]
                } else {
                    uniform(1.0 / (fan_in.max(1) as f64).sqrt(), &mut rng)
                }
            }
        };
        let t = Tensor::from_vec(data, shape, &inner.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F64)?)?;
        self.lock().vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    /// `(name, var)` pairs sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.lock().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.lock().vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let inner = self.lock();
        let mut vars = BTreeMap::new();
        for (k, v) in &inner.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars,
                seed: inner.seed,
                frozen: inner.frozen,
                zero_init_outputs: inner.zero_init_outputs,
                device: inner.device.clone(),
            })),
        })
    }
}

/// A dotted name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.pp(name).prefix, shape, init)
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", &[out_dim, in_dim], Init::Uniform { bound })?,
            bias: Some(p.get("bias", &[out_dim], Init::Uniform { bound })?),
        })
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zero_out(p: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = Init::ZeroOut { fan_in: in_dim };
        Ok(Self {
            weight: p.get("weight", &[out_dim, in_dim], init)?,
            bias: Some(p.get("bias", &[out_dim], init)?),
        })
    }

    /// Linear layer whose bias starts at zero.
    pub fn zero_bias(p: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", &[out_dim, in_dim], Init::Uniform { bound })?,
            bias: Some(p.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 1 {
            x.unsqueeze(0)?.matmul(&self.weight.t()?)?.squeeze(0)?
        } else {
            x.broadcast_matmul(&self.weight.t()?)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform { bound })?,
            bias: p.get("bias", &[out_ch], Init::Uniform { bound })?,
            stride,
            padding: (kernel - 1) / 2,
        })
    }

    /// `x`: `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

fn pick_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("weight", &[channels], Init::Ones)?,
            beta: p.get("bias", &[channels], Init::Zeros)?,
            groups: pick_groups(channels),
            eps: 1e-5,
        })
    }

    /// `x`: `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let normed = normalize_last(&g, self.eps)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("weight", &[dim], Init::Ones)?,
            beta: p.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x, self.eps)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Multi-head scaled dot-product attention on already-projected inputs.
///
/// `q`: `[B, Lq, H*d]`, `k`/`v`: `[B, Lk, H*d]` → `[B, Lq, H*d]`.
pub fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, lq, inner) = q.dims3()?;
    let lk = k.dims()[1];
    let d = inner / heads;
    let split =
        |x: &Tensor, l: usize| -> Result<Tensor> { Ok(x.reshape((b, l, heads, d))?.transpose(1, 2)?.contiguous()?) };
    let (q, k, v) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let probs = softmax_last(&scores)?;
    let out = probs.matmul(&v)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, lq, inner))?)
}

/// Projected attention block with a zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(p: &ParamPath, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(&p.pp("to_q"), query_dim, query_dim)?,
            to_k: Linear::new(&p.pp("to_k"), context_dim, query_dim)?,
            to_v: Linear::zero_bias(&p.pp("to_v"), context_dim, query_dim)?,
            to_out: Linear::zero_out(&p.pp("to_out"), query_dim, query_dim)?,
            heads,
        })
    }

    /// Attention read-out before the output projection.
    pub fn attend(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        scaled_dot_product(&q, &k, &v, self.heads)
    }

    /// `x`: `[B, Lq, D]`, `context`: `[B, Lk, Dc]` → `[B, Lq, D]`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.to_out.forward(&self.attend(x, context)?)
    }
}

/// Sinusoidal features `[cos(t f_i) ..., sin(t f_i) ...]` of length `dim`.
pub fn timestep_features(t: f64, dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp())
        .collect();
    v.extend(freqs.iter().map(|f| (t * f).cos()));
    v.extend(freqs.iter().map(|f| (t * f).sin()));
    v.resize(dim, 0.0);
    Ok(Tensor::from_vec(v, dim, device)?)
}
