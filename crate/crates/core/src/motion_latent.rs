//! Audio-to-latents: maps audio or a motion-variance scalar to one query
//! token, attends over a bank of learnable embeddings, and projects the
//! result to the timestep-embedding width.

use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;

use crate::config::{AudioPooling, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{scaled_dot_product, softmax_last, Init, Linear, ParamPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionTag {
    Audio,
    HeadMove,
    Expression,
}

impl ConditionTag {
    pub const ALL: [Self; 3] = [Self::Audio, Self::HeadMove, Self::Expression];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::HeadMove => "head_move",
            Self::Expression => "expression",
        }
    }
}

impl FromStr for ConditionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "head_move" | "head_move_var" => Ok(Self::HeadMove),
            "expression" | "expr_var" => Ok(Self::Expression),
            other => Err(Error::UnknownConditionTag(other.to_string())),
        }
    }
}

/// A condition routed through the motion-latent bank.
#[derive(Debug, Clone)]
pub enum MotionCondition {
    /// `[F, 5, A]` audio windows, pooled to one token.
    Audio(Tensor),
    HeadMove(f64),
    Expression(f64),
}

impl MotionCondition {
    pub fn tag(&self) -> ConditionTag {
        match self {
            Self::Audio(_) => ConditionTag::Audio,
            Self::HeadMove(_) => ConditionTag::HeadMove,
            Self::Expression(_) => ConditionTag::Expression,
        }
    }
}

/// Training draws each tag with probability 1/3; inference always uses audio.
pub fn sample_training_condition<R: Rng + ?Sized>(rng: &mut R, training: bool) -> ConditionTag {
    if !training {
        return ConditionTag::Audio;
    }
    ConditionTag::ALL[rng.random_range(0..3)]
}

#[derive(Debug, Clone)]
pub struct MotionLatentBank {
    /// `[n_embeddings, qkv_dim]`
    pub learnable_embeddings: Tensor,
    pub q_audio: Linear,
    pub q_head_move: Linear,
    pub q_expression: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    /// Query vector for attention pooling of audio tokens.
    audio_pool_query: Option<Tensor>,
    audio_dim: usize,
}

impl MotionLatentBank {
    pub fn new(p: &ParamPath, cfg: &ModelConfig) -> Result<Self> {
        let q = cfg.qkv_dim;
        Ok(Self {
            learnable_embeddings: p.get(
                "learnable_embeddings",
                &[cfg.n_learnable_embeddings, q],
                Init::Normal { std: 1.0 },
            )?,
            q_audio: Linear::new(&p.pp("q_audio"), cfg.audio_feature_dim, q)?,
            q_head_move: Linear::new(&p.pp("q_head_move"), 1, q)?,
            q_expression: Linear::new(&p.pp("q_expression"), 1, q)?,
            to_k: Linear::new(&p.pp("to_k"), q, q)?,
            to_v: Linear::new(&p.pp("to_v"), q, q)?,
            to_out: Linear::zero_out(&p.pp("to_out"), q, cfg.time_embed_dim)?,
            audio_pool_query: match cfg.audio_pooling {
                AudioPooling::Mean => None,
                AudioPooling::Attention => {
                    Some(p.get("audio_pool_query", &[cfg.audio_feature_dim], Init::Normal { std: 0.02 })?)
                }
            },
            audio_dim: cfg.audio_feature_dim,
        })
    }

    /// Pools `[F, 5, A]` audio windows into one `[A]` vector.
    pub fn pool_audio(&self, audio: &Tensor) -> Result<Tensor> {
        if audio.rank() != 3 || audio.dims()[2] != self.audio_dim {
            return Err(Error::shape("audio embedding", &[0, 5, self.audio_dim], audio.dims()));
        }
        let tokens = audio.flatten_to(1)?;
        Ok(match &self.audio_pool_query {
            None => tokens.mean(0)?,
            Some(query) => {
                let scores = tokens.matmul(&query.unsqueeze(1)?)?.squeeze(1)?;
                let w = softmax_last(&(scores / (self.audio_dim as f64).sqrt())?)?;
                w.unsqueeze(0)?.matmul(&tokens)?.squeeze(0)?
            }
        })
    }

    fn query(&self, cond: &MotionCondition) -> Result<Tensor> {
        let dev = self.learnable_embeddings.device();
        match cond {
            MotionCondition::Audio(a) => self.q_audio.forward(&self.pool_audio(a)?),
            MotionCondition::HeadMove(v) => {
                let x = Tensor::new(&[v.max(0.0).ln_1p()], dev)?;
                self.q_head_move.forward(&x)
            }
            MotionCondition::Expression(v) => {
                let x = Tensor::new(&[v.max(0.0).ln_1p()], dev)?;
                self.q_expression.forward(&x)
            }
        }
    }

    /// Attention read-out over the bank, before the output projection
    /// (`[qkv_dim]`).
    pub fn attend(&self, cond: &MotionCondition) -> Result<Tensor> {
        let q = self.query(cond)?.reshape((1, 1, ()))?;
        let k = self.to_k.forward(&self.learnable_embeddings)?.unsqueeze(0)?;
        let v = self.to_v.forward(&self.learnable_embeddings)?.unsqueeze(0)?;
        Ok(scaled_dot_product(&q, &k, &v, 1)?.flatten_all()?)
    }

    /// Motion latent `[time_embed_dim]`.
    pub fn to_motion_latent(&self, cond: &MotionCondition) -> Result<Tensor> {
        self.to_out.forward(&self.attend(cond)?)
    }
}

#[cfg(test)]
pub(crate) fn l2(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.sum(candle_core::D::Minus1)?.sqrt()?.to_scalar()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(zero_out: bool) -> (ParamStore, MotionLatentBank) {
        let s = ParamStore::new(5, &Device::Cpu);
        s.set_zero_init_outputs(zero_out);
        let b = MotionLatentBank::new(&s.root(), &ModelConfig::toy()).unwrap();
        (s, b)
    }

    fn audio(seed: u64) -> Tensor {
        let s = ParamStore::new(seed, &Device::Cpu);
        s.get("a", &[4, 5, 16], Init::Normal { std: 1.0 }).unwrap()
    }

    #[test]
    fn latent_shape_is_shared_across_tags() {
        let (_, b) = bank(false);
        for c in [
            MotionCondition::Audio(audio(1)),
            MotionCondition::HeadMove(2.0),
            MotionCondition::Expression(0.1),
        ] {
            assert_eq!(b.to_motion_latent(&c).unwrap().dims(), &[64]);
        }
    }

    #[test]
    fn zero_values_give_output_bias() {
        let (_, mut b) = bank(false);
        b.to_v.weight = b.to_v.weight.zeros_like().unwrap();
        b.to_v.bias = Some(b.to_v.bias.as_ref().unwrap().zeros_like().unwrap());
        let bias: Vec<f64> = b.to_out.bias.as_ref().unwrap().to_vec1().unwrap();
        for c in [MotionCondition::HeadMove(3.0), MotionCondition::Audio(audio(2))] {
            let got: Vec<f64> = b.to_motion_latent(&c).unwrap().to_vec1().unwrap();
            assert_eq!(got, bias);
        }
    }

    #[test]
    fn identical_bank_entries_ignore_query() {
        let (_, mut b) = bank(false);
        let row = b.learnable_embeddings.get(0).unwrap();
        b.learnable_embeddings = row
            .unsqueeze(0)
            .unwrap()
            .broadcast_as((16, 32))
            .unwrap()
            .contiguous()
            .unwrap();
        let a = b.to_motion_latent(&MotionCondition::HeadMove(0.5)).unwrap();
        let c = b.to_motion_latent(&MotionCondition::Expression(9.0)).unwrap();
        let diff = l2(&(a - c).unwrap()).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn distinct_scalars_give_distinct_latents() {
        let (_, b) = bank(false);
        let a = b.to_motion_latent(&MotionCondition::HeadMove(0.5)).unwrap();
        let c = b.to_motion_latent(&MotionCondition::HeadMove(2.0)).unwrap();
        assert!(l2(&(a - c).unwrap()).unwrap() > 1e-6);
    }

    #[test]
    fn unknown_tag() {
        assert!(matches!(
            "pitch".parse::<ConditionTag>(),
            Err(Error::UnknownConditionTag(_))
        ));
        assert_eq!("head_move".parse::<ConditionTag>().unwrap(), ConditionTag::HeadMove);
    }

    #[test]
    fn every_tag_reaches_the_bank() {
        let (store, b) = bank(false);
        let name = "learnable_embeddings";
        for c in [
            MotionCondition::Audio(audio(1)),
            MotionCondition::HeadMove(2.0),
            MotionCondition::Expression(0.3),
        ] {
            let loss = b.to_motion_latent(&c).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let g = grads
                .get(store.var(name).unwrap().as_tensor())
                .expect("gradient reaches bank");
            let norm: f64 = g.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(norm > 0.0, "{:?}", c.tag());
        }
    }

    #[test]
    fn tag_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = sample_training_condition(&mut rng, true);
            counts[ConditionTag::ALL.iter().position(|x| *x == t).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.323..=0.343).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn inference_always_uses_audio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_training_condition(&mut rng, false) == ConditionTag::Audio));
    }

    #[test]
    fn seeded_tag_sequence_repeats() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..50)
                .map(|_| sample_training_condition(&mut rng, true))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn attention_pooling_variant() {
        let s = ParamStore::new(5, &Device::Cpu);
        let cfg = ModelConfig {
            audio_pooling: AudioPooling::Attention,
            ..ModelConfig::toy()
        };
        let b = MotionLatentBank::new(&s.root(), &cfg).unwrap();
        let pooled = b.pool_audio(&audio(3)).unwrap();
        assert_eq!(pooled.dims(), &[16]);
        let constant = Tensor::ones((4, 5, 16), DType::F64, &Device::Cpu).unwrap();
        let p: Vec<f64> = b.pool_audio(&constant).unwrap().to_vec1().unwrap();
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
