//! Binary checkpoint format. See `docs/checkpoint.md`.
//!
//! Layout: `b"AVCK"`, `u32` version, `u64` header length, JSON header,
//! then little-endian `f64` tensor data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AvatarModel, Stage};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stage: Stage,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &AvatarModel, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        let tensors: BTreeMap<String, Tensor> = model
            .params
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            let len = t.elem_count();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        Self {
            header: CheckpointHeader {
                config: model.cfg.clone(),
                stage: model.stage,
                tensors: entries,
                metadata,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            let t = &self.tensors[&e.name];
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointMismatch(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend])?;
        let data = &bytes[hend..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(&format!("tensor {} shape/len disagree", e.name)));
            }
            let start = e.offset * 8;
            let end = (e.offset + e.len) * 8;
            if end > data.len() {
                return Err(bad(&format!("tensor {} past end of data", e.name)));
            }
            let vals: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(vals, e.shape.as_slice(), device)?);
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a temporary file in the target directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes()?)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, device)
    }

    /// Parameter store holding this checkpoint's tensors.
    pub fn to_store(&self, device: &Device) -> Result<ParamStore> {
        let store = ParamStore::new(self.header.config.seed, device);
        for (name, t) in &self.tensors {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Rebuilds the model exactly; every parameter must be present.
    pub fn to_model(&self, device: &Device) -> Result<AvatarModel> {
        let store = self.to_store(device)?;
        store.set_frozen(true);
        let model = AvatarModel::new(self.header.config.clone(), self.header.stage, store).map_err(|e| match e {
            Error::MissingParam(n) => Error::CheckpointMismatch(format!("missing tensor `{n}`")),
            e => e,
        })?;
        model.params.set_frozen(false);
        if model.params.len() != self.tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {} tensors, model uses {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Stage-2 model initialized from a stage-1 checkpoint: shared weights
    /// are copied, new modules start from their (zero-output) init.
    pub fn to_stage2_model(&self, cfg: &ModelConfig, device: &Device) -> Result<AvatarModel> {
        if self.header.stage != Stage::One {
            return Err(Error::CheckpointMismatch("expected a stage-1 checkpoint".into()));
        }
        let ours = cfg.clone().validate()?;
        let theirs = &self.header.config;
        let arch = |c: &ModelConfig| {
            (
                c.latent_channels,
                c.latent_height,
                c.latent_width,
                c.unet_channel_schedule.clone(),
                c.attention_heads,
                c.time_embed_dim,
                c.noise_steps,
            )
        };
        if arch(&ours) != arch(theirs) {
            return Err(Error::CheckpointMismatch(
                "stage-1 architecture differs from config".into(),
            ));
        }
        let store = self.to_store(device)?;
        AvatarModel::new(ours, Stage::Two, store)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}
