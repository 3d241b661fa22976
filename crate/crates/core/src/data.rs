//! Procedural talking-face dataset: a shaded disk with eyes, brows and a
//! mouth whose aperture follows the audio envelope.
//!
//! Each video has grayscale PNG frames, a mono 16-bit WAV track and a
//! keypoint JSON-lines file. Keypoint layout: nose tip at 0, upper face
//! (brows, eyes, nose bridge, upper contour) at 1..=37, mouth at 38..=57.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTrack;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent_codec::PatchCodec;
use crate::motion::{KeypointIndexMap, KeypointSequence, UPPER_FACE_POINTS};

pub const NUM_KEYPOINTS: usize = 58;
const MOUTH_OUTER: usize = 12;
const MOUTH_INNER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub sample_rate: u32,
}

impl SynthOptions {
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        let (width, height) = PatchCodec::for_config(cfg)?.image_size();
        Ok(Self {
            width,
            height,
            fps: cfg.fps,
            sample_rate: cfg.audio_sample_rate,
        })
    }
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            fps: 25.0,
            sample_rate: 16_000,
        }
    }
}

pub fn keypoint_index_map() -> KeypointIndexMap {
    KeypointIndexMap {
        nose_index: 0,
        upper_face_indices: (1..=UPPER_FACE_POINTS).collect(),
        mouth_indices: (UPPER_FACE_POINTS + 1..NUM_KEYPOINTS).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    pub frames: Vec<GrayImage>,
    pub audio: AudioTrack,
    pub keypoints: KeypointSequence,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub seed: u64,
    pub options: SynthOptions,
    pub videos: Vec<SynthVideo>,
}

/// Per-video latent parameters.
#[derive(Debug, Clone, Copy)]
struct Drivers {
    speech_period: f64,
    speech_phase: f64,
    syllable_period: f64,
    head_amp: f64,
    head_phase: f64,
    brow_period: f64,
    brow_phase: f64,
    carrier_hz: f64,
    face_shade: f64,
}

impl Drivers {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            speech_period: rng.random_range(20.0..40.0),
            speech_phase: rng.random_range(0.0..2.0 * PI),
            syllable_period: rng.random_range(5.0..9.0),
            head_amp: rng.random_range(0.04..0.1),
            head_phase: rng.random_range(0.0..2.0 * PI),
            brow_period: rng.random_range(15.0..30.0),
            brow_phase: rng.random_range(0.0..2.0 * PI),
            carrier_hz: rng.random_range(150.0..400.0),
            face_shade: rng.random_range(0.6..0.85),
        }
    }

    /// Audio envelope in `[0, 1]` at fractional frame time `f`.
    fn envelope(&self, f: f64) -> f64 {
        let phrase = 0.5 + 0.5 * (2.0 * PI * f / self.speech_period + self.speech_phase).sin();
        let syllable = 0.5 + 0.5 * (2.0 * PI * f / self.syllable_period).sin();
        phrase * (0.3 + 0.7 * syllable)
    }

    /// Head offset (fraction of face radius), driven by the slow speech phrase.
    fn head(&self, f: f64) -> (f64, f64) {
        let a = 2.0 * PI * f / self.speech_period + self.speech_phase + self.head_phase;
        (self.head_amp * a.sin(), 0.5 * self.head_amp * (2.0 * a).cos())
    }

    fn brow(&self, f: f64) -> f64 {
        0.08 * (2.0 * PI * f / self.brow_period + self.brow_phase).sin()
    }
}

struct Face {
    cx: f64,
    cy: f64,
    r: f64,
    brow: f64,
    aperture: f64,
}

impl Face {
    fn keypoints(&self) -> Vec<[f64; 2]> {
        let (cx, cy, r) = (self.cx, self.cy, self.r);
        let mut pts = Vec::with_capacity(NUM_KEYPOINTS);
        pts.push([cx, cy + 0.05 * r]);
        for side in [-1.0, 1.0] {
            for i in 0..5 {
                let u = i as f64 / 4.0;
                pts.push([
                    cx + side * (0.15 + 0.35 * u) * r,
                    cy - (0.45 + self.brow) * r - 0.04 * r * (PI * u).sin(),
                ]);
            }
        }
        for side in [-1.0, 1.0] {
            for i in 0..6 {
                let a = 2.0 * PI * i as f64 / 6.0;
                pts.push([
                    cx + side * 0.33 * r + 0.1 * r * a.cos(),
                    cy - 0.2 * r + 0.06 * r * a.sin(),
                ]);
            }
        }
        for i in 0..4 {
            pts.push([cx, cy - (0.3 - 0.08 * i as f64) * r]);
        }
        for i in 0..11 {
            let a = PI + PI * i as f64 / 10.0;
            pts.push([cx + r * a.cos(), cy + r * a.sin()]);
        }
        let (mx, my) = (cx, cy + 0.45 * r);
        let half_h = |scale: f64| (0.03 + 0.2 * self.aperture) * r * scale;
        for i in 0..MOUTH_OUTER {
            let a = 2.0 * PI * i as f64 / MOUTH_OUTER as f64;
            pts.push([mx + 0.3 * r * a.cos(), my + half_h(1.0) * a.sin()]);
        }
        for i in 0..MOUTH_INNER {
            let a = 2.0 * PI * i as f64 / MOUTH_INNER as f64;
            pts.push([mx + 0.2 * r * a.cos(), my + half_h(0.7) * a.sin()]);
        }
        debug_assert_eq!(pts.len(), NUM_KEYPOINTS);
        pts
    }

    fn intensity(&self, x: f64, y: f64, shade: f64) -> f64 {
        let (cx, cy, r) = (self.cx, self.cy, self.r);
        let (dx, dy) = ((x - cx) / r, (y - cy) / r);
        if dx * dx + dy * dy > 1.0 {
            return 0.08;
        }
        let mut v = shade - 0.15 * dy;
        for side in [-1.0, 1.0] {
            let (ex, ey) = ((dx - side * 0.33) / 0.1, (dy + 0.2) / 0.06);
            if ex * ex + ey * ey <= 1.0 {
                v = 0.15;
            }
            let bx = dx - side * 0.32;
            if bx.abs() <= 0.2 && (dy + 0.47 + self.brow).abs() <= 0.04 {
                v = 0.25;
            }
        }
        let (mx, my) = (dx / 0.3, (dy - 0.45) / (0.03 + 0.2 * self.aperture));
        if mx * mx + my * my <= 1.0 {
            v = 0.05;
        }
        v
    }
}

const SUPERSAMPLE: usize = 4;

fn render(face: &Face, opts: &SynthOptions, shade: f64) -> GrayImage {
    GrayImage::from_fn(opts.width, opts.height, |px, py| {
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                acc += face.intensity(x, y, shade);
            }
        }
        let v = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn synth_video(id: String, frames: usize, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Result<SynthVideo> {
    let d = Drivers::sample(rng);
    let (w, h) = (opts.width as f64, opts.height as f64);
    let r = 0.38 * w.min(h);
    let mut images = Vec::with_capacity(frames);
    let mut points = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 + 0.5;
        let (hx, hy) = d.head(t);
        let face = Face {
            cx: w / 2.0 + hx * r,
            cy: h / 2.0 + hy * r,
            r,
            brow: d.brow(t),
            aperture: d.envelope(t),
        };
        images.push(render(&face, opts, d.face_shade));
        points.push(face.keypoints());
    }
    let hop = opts.sample_rate as f64 / opts.fps;
    let n_samples = (frames as f64 * hop).round() as usize;
    let samples: Vec<f64> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / hop;
            let phase = 2.0 * PI * d.carrier_hz * i as f64 / opts.sample_rate as f64;
            0.6 * d.envelope(t) * phase.sin()
        })
        .collect();
    let audio = AudioTrack::new(samples, opts.sample_rate)?.quantized();
    Ok(SynthVideo {
        id,
        frames: images,
        audio,
        keypoints: KeypointSequence::new(points, keypoint_index_map())?,
    })
}

/// Deterministic per `seed`; video `i` depends only on `(seed, i)`.
pub fn synth_dataset(n_videos: usize, frames_per_video: usize, seed: u64, opts: &SynthOptions) -> Result<SynthDataset> {
    let videos = (0..n_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_video(format!("video_{i:04}"), frames_per_video, opts, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        seed,
        options: *opts,
        videos,
    })
}

/// Per-frame RMS of the audio track.
pub fn frame_rms(audio: &AudioTrack, fps: f64, frames: usize) -> Vec<f64> {
    let hop = audio.sample_rate as f64 / fps;
    (0..frames)
        .map(|f| {
            let a = (f as f64 * hop).round() as usize;
            let b = (((f + 1) as f64 * hop).round() as usize).min(audio.samples.len());
            let seg = &audio.samples[a.min(b)..b];
            if seg.is_empty() {
                0.0
            } else {
                (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt()
            }
        })
        .collect()
}

/// Vertical lip separation per frame, from the keypoints.
pub fn mouth_aperture(kps: &KeypointSequence) -> Vec<f64> {
    let first = UPPER_FACE_POINTS + 1;
    let lower = first + MOUTH_OUTER / 4;
    let upper = first + 3 * MOUTH_OUTER / 4;
    kps.points.iter().map(|p| p[lower][1] - p[upper][1]).collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

impl SynthVideo {
    /// Correlation between audio loudness and mouth opening.
    pub fn envelope_aperture_correlation(&self, fps: f64) -> f64 {
        let rms = frame_rms(&self.audio, fps, self.frames.len());
        pearson(&rms, &mouth_aperture(&self.keypoints))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
    pub frames_dir: String,
    pub audio: String,
    pub keypoints: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub options: SynthOptions,
    pub videos: Vec<VideoEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

impl SynthDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            options: self.options,
            videos: self
                .videos
                .iter()
                .map(|v| VideoEntry {
                    id: v.id.clone(),
                    frames: v.frames.len(),
                    frames_dir: format!("{}/frames", v.id),
                    audio: format!("{}/audio.wav", v.id),
                    keypoints: format!("{}/keypoints.jsonl", v.id),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (v, e) in self.videos.iter().zip(&manifest.videos) {
            let frames_dir = dir.join(&e.frames_dir);
            std::fs::create_dir_all(&frames_dir)?;
            for (i, img) in v.frames.iter().enumerate() {
                img.save(frames_dir.join(frame_file_name(i)))?;
            }
            v.audio.write_wav(dir.join(&e.audio))?;
            v.keypoints.write_jsonl(dir.join(&e.keypoints))?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for e in &manifest.videos {
            let frames_dir: PathBuf = dir.join(&e.frames_dir);
            let frames = (0..e.frames)
                .map(|i| Ok(image::open(frames_dir.join(frame_file_name(i)))?.to_luma8()))
                .collect::<Result<Vec<_>>>()?;
            let keypoints = KeypointSequence::read_jsonl(dir.join(&e.keypoints))?;
            if keypoints.frames() != e.frames {
                return Err(Error::FrameCountMismatch {
                    generated: e.frames,
                    ground_truth: keypoints.frames(),
                });
            }
            videos.push(SynthVideo {
                id: e.id.clone(),
                frames,
                audio: AudioTrack::read_wav(dir.join(&e.audio))?,
                keypoints,
            });
        }
        Ok(Self {
            seed: manifest.seed,
            options: manifest.options,
            videos,
        })
    }
}
