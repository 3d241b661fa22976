//! Audio ingestion and per-video-frame audio features.
//!
//! Feature extraction sits behind [`FeatureExtractor`]. The built-in
//! [`LogMelExtractor`] computes a 64-band log-mel frame per video frame and
//! applies a fixed seeded random projection; a pretrained speech encoder can
//! be plugged in by implementing the same trait (e.g. concatenating the
//! hidden states of every layer per frame).

use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Frames on each side of the current frame in an audio window.
pub const WINDOW_RADIUS: usize = 2;
pub const WINDOW_LEN: usize = 2 * WINDOW_RADIUS + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Format("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "expected mono 16-bit PCM WAV, got {} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes a mono 16-bit PCM WAV file (samples saturate at full scale).
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for s in &self.samples {
            w.write_sample(quantize(*s))?;
        }
        w.finalize()?;
        Ok(())
    }

    /// The track as it reads back from a 16-bit WAV file.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| quantize(*s) as f64 / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Number of video frames a track spans at `fps` (partial frames count).
pub fn video_frame_count(n_samples: usize, sample_rate: u32, fps: f64) -> usize {
    let exact = n_samples as f64 * fps / sample_rate as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Produces one feature vector per video frame.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// `[n_video_frames, dim]`
    fn extract(&self, track: &AudioTrack, fps: f64) -> Result<Tensor>;
}

/// 25 ms log-mel frames at the video frame rate, randomly projected.
#[derive(Clone)]
pub struct LogMelExtractor {
    pub sample_rate: u32,
    pub bands: usize,
    pub out_dim: usize,
    pub seed: u64,
    window_len: usize,
    n_fft: usize,
    hann: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    projection: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("sample_rate", &self.sample_rate)
            .field("bands", &self.bands)
            .field("out_dim", &self.out_dim)
            .field("seed", &self.seed)
            .finish()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters as sparse `(bin, weight)` lists.
fn mel_filters(bands: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    (0..bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .filter_map(|k| {
                    let f = bin_hz(k);
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

impl LogMelExtractor {
    pub const SAMPLE_RATE: u32 = 16_000;

    pub fn new(bands: usize, out_dim: usize, seed: u64) -> Self {
        let sample_rate = Self::SAMPLE_RATE;
        let window_len = (sample_rate as usize * 25) / 1000;
        let n_fft = window_len.next_power_of_two();
        let hann = (0..window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window_len as f64).cos())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (bands as f64).sqrt();
        let projection = (0..bands * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            sample_rate,
            bands,
            out_dim,
            seed,
            window_len,
            n_fft,
            hann,
            filters: mel_filters(bands, n_fft, sample_rate),
            projection,
            fft,
        }
    }

    /// Log-mel energies, one row of `bands` per video frame.
    pub fn log_mel(&self, track: &AudioTrack, fps: f64) -> Result<Vec<Vec<f64>>> {
        if track.samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if track.sample_rate != self.sample_rate {
            return Err(Error::UnsupportedSampleRate {
                got: track.sample_rate,
                expected: self.sample_rate,
            });
        }
        let n_frames = video_frame_count(track.samples.len(), track.sample_rate, fps);
        let hop = track.sample_rate as f64 / fps;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut rows = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = (f as f64 * hop).round() as usize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.hann.iter().enumerate() {
                if let Some(s) = track.samples.get(start + i) {
                    buf[i].re = s * w;
                }
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            rows.push(
                self.filters
                    .iter()
                    .map(|fl| (fl.iter().map(|(k, w)| power[*k] * w).sum::<f64>() + 1e-10).ln())
                    .collect(),
            );
        }
        Ok(rows)
    }
}

impl FeatureExtractor for LogMelExtractor {
    fn id(&self) -> String {
        format!(
            "logmel{}-{}ms-proj{}-seed{}",
            self.bands,
            self.window_len * 1000 / self.sample_rate as usize,
            self.out_dim,
            self.seed
        )
    }

    fn dim(&self) -> usize {
        self.out_dim
    }

    fn extract(&self, track: &AudioTrack, fps: f64) -> Result<Tensor> {
        let mel = self.log_mel(track, fps)?;
        let n = mel.len();
        let mut out: Vec<f64> = Vec::with_capacity(n * self.out_dim);
        for row in &mel {
            for j in 0..self.out_dim {
                out.push(
                    row.iter()
                        .enumerate()
                        .map(|(b, v)| v * self.projection[b * self.out_dim + j])
                        .sum(),
                );
            }
        }
        Ok(Tensor::from_vec(out, (n, self.out_dim), &Device::Cpu)?)
    }
}

/// `[n, D]` → `[n, 5, D]`: each frame with its two neighbours on either
/// side, clamped at the ends.
pub fn window_stack(features: &Tensor) -> Result<Tensor> {
    let (n, _) = features.dims2()?;
    if n == 0 {
        return Err(Error::EmptyAudio);
    }
    let mut idx = Vec::with_capacity(n * WINDOW_LEN);
    for f in 0..n as i64 {
        for o in -(WINDOW_RADIUS as i64)..=WINDOW_RADIUS as i64 {
            idx.push((f + o).clamp(0, n as i64 - 1) as u32);
        }
    }
    let idx = Tensor::new(idx.as_slice(), features.device())?;
    let d = features.dims()[1];
    Ok(features.index_select(&idx, 0)?.reshape((n, WINDOW_LEN, d))?)
}

/// Extracts features and stacks windows: `[n_video_frames, 5, D]`.
#[derive(Debug, Clone)]
pub struct AudioEmbeddingSequence {
    pub embed: Tensor,
    pub source: String,
}

pub fn audio_embeddings(
    track: &AudioTrack,
    fps: f64,
    extractor: &dyn FeatureExtractor,
) -> Result<AudioEmbeddingSequence> {
    let feats = extractor.extract(track, fps)?;
    Ok(AudioEmbeddingSequence {
        embed: window_stack(&feats)?,
        source: extractor.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_track(seconds: f64, seed: u64) -> AudioTrack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 16_000.0) as usize;
        let samples = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        AudioTrack::new(samples, 16_000).unwrap()
    }

    #[test]
    fn one_second_gives_fps_rows() {
        let ex = LogMelExtractor::new(64, 8, 0);
        let f = ex.extract(&noise_track(1.0, 1), 25.0).unwrap();
        assert_eq!(f.dims(), &[25, 8]);
    }

    #[test]
    fn silence_maps_to_constant_rows() {
        let ex = LogMelExtractor::new(64, 8, 0);
        let t = AudioTrack::new(vec![0.0; 8000], 16_000).unwrap();
        let rows: Vec<Vec<f64>> = ex.extract(&t, 25.0).unwrap().to_vec2().unwrap();
        assert!(rows.iter().all(|r| r == &rows[0]));
    }

    #[test]
    fn errors() {
        let ex = LogMelExtractor::new(64, 8, 0);
        let empty = AudioTrack::new(vec![], 16_000).unwrap();
        assert!(matches!(ex.extract(&empty, 25.0), Err(Error::EmptyAudio)));
        let wrong = AudioTrack::new(vec![0.0; 100], 44_100).unwrap();
        assert!(matches!(
            ex.extract(&wrong, 25.0),
            Err(Error::UnsupportedSampleRate {
                got: 44_100,
                expected: 16_000
            })
        ));
    }

    #[test]
    fn golden_white_noise_features() {
        let ex = LogMelExtractor::new(64, 8, 7);
        let got: Vec<Vec<f64>> = ex.extract(&noise_track(0.4, 99), 25.0).unwrap().to_vec2().unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/logmel_white_noise.json");
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(path, serde_json::to_string_pretty(&got).unwrap()).unwrap();
        }
        let want: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(got.len(), 10);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            approx::assert_relative_eq!(g, w, max_relative = 1e-12);
        }
    }

    #[test]
    fn window_stack_cases() {
        let dev = Device::Cpu;
        let one = Tensor::new(&[[3.0f64, 4.0]], &dev).unwrap();
        let w: Vec<Vec<Vec<f64>>> = window_stack(&one).unwrap().to_vec3().unwrap();
        assert_eq!(w[0], vec![vec![3.0, 4.0]; 5]);

        let ramp = Tensor::arange(0f64, 5.0, &dev).unwrap().unsqueeze(1).unwrap();
        let w: Vec<Vec<Vec<f64>>> = window_stack(&ramp).unwrap().to_vec3().unwrap();
        let flat = |r: &Vec<Vec<f64>>| r.iter().map(|v| v[0]).collect::<Vec<_>>();
        assert_eq!(flat(&w[2]), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat(&w[0]), vec![0.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(flat(&w[4]), vec![2.0, 3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let t = noise_track(0.1, 3);
        t.write_wav(&p).unwrap();
        let back = AudioTrack::read_wav(&p).unwrap();
        assert_eq!(back, t.quantized());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn center_alignment_and_shift(vals in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
                let n = vals.len();
                let t = Tensor::from_vec(vals.clone(), (n, 1), &Device::Cpu).unwrap();
                let w: Vec<Vec<Vec<f64>>> = window_stack(&t).unwrap().to_vec3().unwrap();
                for f in 0..n {
                    prop_assert_eq!(w[f][2][0], vals[f]);
                }
                // dropping the first frame shifts interior windows by one
                if n > 5 {
                    let t2 = Tensor::from_vec(vals[1..].to_vec(), (n - 1, 1), &Device::Cpu).unwrap();
                    let w2: Vec<Vec<Vec<f64>>> = window_stack(&t2).unwrap().to_vec3().unwrap();
                    for f in 2..n - 3 {
                        prop_assert_eq!(&w2[f], &w[f + 1]);
                    }
                }
            }
        }
    }
}
