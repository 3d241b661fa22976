//! Long-video inference from a checkpoint, audio track and reference image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{audio_embeddings, AudioTrack, FeatureExtractor};
use crate::checkpoint::{file_sha256, Checkpoint};
use crate::data::frame_file_name;
use crate::diffusion::{generate_long_video, LongVideoConditions};
use crate::error::{Error, Result};
use crate::latent_codec::PatchCodec;
use crate::model::AvatarModel;
use crate::train::extractor_for;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferManifest {
    pub fps: f64,
    pub clip_len: usize,
    pub frame_count: usize,
    /// Half-open `[start, end)` frame ranges, one per clip.
    pub clip_boundaries: Vec<[usize; 2]>,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub audio_sha256: String,
    pub reference_sha256: String,
    pub audio_features: String,
    pub frames: Vec<String>,
}

/// `clip_len * ceil(seconds * fps / clip_len)`.
pub fn output_frame_count(seconds: f64, fps: f64, clip_len: usize) -> usize {
    let raw = (seconds * fps - 1e-9).ceil().max(0.0) as usize;
    raw.div_ceil(clip_len) * clip_len
}

#[derive(Debug, Clone)]
pub struct InferRequest {
    pub checkpoint: PathBuf,
    pub audio: PathBuf,
    pub reference: PathBuf,
    /// Defaults to the audio duration.
    pub seconds: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Generates frames from an already loaded model.
pub fn infer_with_model(
    model: &AvatarModel,
    track: &AudioTrack,
    reference: &image::GrayImage,
    seconds: f64,
    seed: u64,
) -> Result<Vec<candle_core::Tensor>> {
    let cfg = &model.cfg;
    let dev = model.device();
    let codec = PatchCodec::for_config(cfg)?;
    let n_frames = output_frame_count(seconds, cfg.fps, cfg.clip_len);
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let audio = audio_embeddings(track, cfg.fps, &extractor_for(cfg))?.embed;
    let source = LongVideoConditions {
        ref_latent: codec.encode_image(reference, &dev)?,
        audio_windows: audio,
    };
    let clips = generate_long_video(model, n_frames / cfg.clip_len, &source, seed)?;
    let mut frames = Vec::with_capacity(n_frames);
    for c in clips {
        for f in 0..cfg.clip_len {
            frames.push(c.get(f)?);
        }
    }
    Ok(frames)
}

/// Writes PNG frames and a manifest into `req.out_dir`.
pub fn infer(req: &InferRequest) -> Result<InferManifest> {
    let dev = candle_core::Device::Cpu;
    let ck = Checkpoint::load(&req.checkpoint, &dev)?;
    let model = ck.to_model(&dev)?;
    let cfg = &model.cfg;
    let track = AudioTrack::read_wav(&req.audio)?;
    if track.samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let reference = image::open(&req.reference)?.to_luma8();
    let seconds = req.seconds.unwrap_or_else(|| track.duration());
    let frames = infer_with_model(&model, &track, &reference, seconds, req.seed)?;

    let codec = PatchCodec::for_config(cfg)?;
    std::fs::create_dir_all(&req.out_dir)?;
    let mut names = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = frame_file_name(i);
        codec.save_png(f, req.out_dir.join(&name))?;
        names.push(name);
    }
    let manifest = InferManifest {
        fps: cfg.fps,
        clip_len: cfg.clip_len,
        frame_count: frames.len(),
        clip_boundaries: (0..frames.len() / cfg.clip_len)
            .map(|k| [k * cfg.clip_len, (k + 1) * cfg.clip_len])
            .collect(),
        seed: req.seed,
        config_hash: cfg.hash(),
        checkpoint_sha256: file_sha256(&req.checkpoint)?,
        audio_sha256: file_sha256(&req.audio)?,
        reference_sha256: file_sha256(&req.reference)?,
        audio_features: extractor_for(cfg).id(),
        frames: names,
    };
    std::fs::write(
        req.out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// SHA-256 over the sorted file names and contents of a directory.
pub fn directory_digest(dir: impl AsRef<Path>) -> Result<String> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut h = Sha256::new();
    for p in entries.iter().filter(|p| p.is_file()) {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(p)?);
    }
    Ok(format!("{:x}", h.finalize()))
}
