//! Keypoint-derived motion conditions and the global-motion / expression
//! metrics.
//!
//! Conventions: population variance over frames, x and y variances summed,
//! per-keypoint values averaged. These follow the main-text definitions;
//! swap them here if a different aggregation is needed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of upper-face keypoints used for expression variance.
pub const UPPER_FACE_POINTS: usize = 37;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointIndexMap {
    pub nose_index: usize,
    pub upper_face_indices: Vec<usize>,
    /// Excluded from expression metrics.
    #[serde(default)]
    pub mouth_indices: Vec<usize>,
}

/// Per-frame 2D keypoints `[F, K, 2]` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    pub points: Vec<Vec<[f64; 2]>>,
    pub index: KeypointIndexMap,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    points: Vec<[f64; 2]>,
}

impl KeypointSequence {
    pub fn new(points: Vec<Vec<[f64; 2]>>, index: KeypointIndexMap) -> Result<Self> {
        let k = points.first().map_or(0, |p| p.len());
        if let Some((f, p)) = points.iter().enumerate().find(|(_, p)| p.len() != k) {
            return Err(Error::InvalidKeypoints(format!(
                "frame {f} has {} keypoints, expected {k}",
                p.len()
            )));
        }
        if !points.is_empty() {
            let all = std::iter::once(&index.nose_index)
                .chain(&index.upper_face_indices)
                .chain(&index.mouth_indices);
            if let Some(bad) = all.into_iter().find(|&&i| i >= k) {
                return Err(Error::InvalidKeypoints(format!(
                    "index {bad} out of range for {k} keypoints"
                )));
            }
        }
        if points.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKeypoints("non-finite coordinate".into()));
        }
        Ok(Self { points, index })
    }

    pub fn frames(&self) -> usize {
        self.points.len()
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            points: self.points[start..start + len].to_vec(),
            index: self.index.clone(),
        }
    }

    /// Upper-face indices with any mouth index removed.
    pub fn expression_indices(&self) -> Vec<usize> {
        self.index
            .upper_face_indices
            .iter()
            .copied()
            .filter(|i| !self.index.mouth_indices.contains(i) && *i != self.index.nose_index)
            .collect()
    }

    /// JSON lines: an index-map header, then `{frame, points}` per frame.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.index)?;
        writeln!(w)?;
        for (frame, points) in self.points.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &FrameRecord {
                    frame,
                    points: points.clone(),
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidKeypoints("missing index-map header".into()))??;
        let index: KeypointIndexMap = serde_json::from_str(&header)?;
        let mut records: Vec<FrameRecord> = Vec::new();
        for line in lines {
            records.push(serde_json::from_str(&line?)?);
        }
        records.sort_by_key(|r| r.frame);
        if let Some((i, r)) = records.iter().enumerate().find(|(i, r)| r.frame != *i) {
            return Err(Error::InvalidKeypoints(format!(
                "frame {} missing (found {} at position {i})",
                i, r.frame
            )));
        }
        Self::new(records.into_iter().map(|r| r.points).collect(), index)
    }
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
}

fn need_frames(kps: &KeypointSequence) -> Result<()> {
    if kps.frames() < 2 {
        return Err(Error::TooFewFrames {
            min: 2,
            got: kps.frames(),
        });
    }
    Ok(())
}

/// `Var_x + Var_y` of the nose tip over the frames.
pub fn head_movement_variance(kps: &KeypointSequence) -> Result<f64> {
    need_frames(kps)?;
    let n = kps.index.nose_index;
    let xs = kps.points.iter().map(move |p| p[n][0]);
    let ys = kps.points.iter().map(move |p| p[n][1]);
    Ok(population_variance(xs) + population_variance(ys))
}

fn relative_variance(kps: &KeypointSequence, indices: &[usize]) -> Result<f64> {
    need_frames(kps)?;
    if indices.is_empty() {
        return Err(Error::InvalidKeypoints("no expression keypoints".into()));
    }
    let nose = kps.index.nose_index;
    let total: f64 = indices
        .iter()
        .map(|&k| {
            let dx = kps.points.iter().map(move |p| p[k][0] - p[nose][0]);
            let dy = kps.points.iter().map(move |p| p[k][1] - p[nose][1]);
            population_variance(dx) + population_variance(dy)
        })
        .sum();
    Ok(total / indices.len() as f64)
}

/// Mean over upper-face keypoints of the variance of their position
/// relative to the nose tip.
pub fn expression_variance(kps: &KeypointSequence) -> Result<f64> {
    let idx: Vec<usize> = kps
        .index
        .upper_face_indices
        .iter()
        .copied()
        .filter(|i| *i != kps.index.nose_index)
        .collect();
    relative_variance(kps, &idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    pub glo: f64,
    pub exp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dglo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dexp: Option<f64>,
}

fn glo_exp(kps: &KeypointSequence) -> Result<(f64, f64)> {
    Ok((
        head_movement_variance(kps)?,
        relative_variance(kps, &kps.expression_indices())?,
    ))
}

/// Glo/Exp of `gen`, and absolute deviations from `gt` when given.
pub fn motion_metrics(gen: &KeypointSequence, gt: Option<&KeypointSequence>) -> Result<MotionMetrics> {
    let (glo, exp) = glo_exp(gen)?;
    let (dglo, dexp) = match gt {
        Some(gt) => {
            if gt.frames() != gen.frames() {
                return Err(Error::FrameCountMismatch {
                    generated: gen.frames(),
                    ground_truth: gt.frames(),
                });
            }
            let (g, e) = glo_exp(gt)?;
            (Some((glo - g).abs()), Some((exp - e).abs()))
        }
        None => (None, None),
    };
    Ok(MotionMetrics { glo, exp, dglo, dexp })
}

/// Video-level metrics: mean of per-window metrics over consecutive
/// non-overlapping windows (a trailing partial window is dropped unless it
/// is the only one).
pub fn windowed_motion_metrics(
    gen: &KeypointSequence,
    gt: Option<&KeypointSequence>,
    window: usize,
) -> Result<MotionMetrics> {
    if let Some(gt) = gt {
        if gt.frames() != gen.frames() {
            return Err(Error::FrameCountMismatch {
                generated: gen.frames(),
                ground_truth: gt.frames(),
            });
        }
    }
    let window = window.max(2);
    let n = gen.frames();
    let starts: Vec<usize> = if n < window {
        vec![0]
    } else {
        (0..=n - window).step_by(window).collect()
    };
    let len = window.min(n);
    let per: Vec<MotionMetrics> = starts
        .iter()
        .map(|&s| motion_metrics(&gen.window(s, len), gt.map(|g| g.window(s, len)).as_ref()))
        .collect::<Result<_>>()?;
    let k = per.len() as f64;
    let mean = |f: &dyn Fn(&MotionMetrics) -> f64| per.iter().map(f).sum::<f64>() / k;
    Ok(MotionMetrics {
        glo: mean(&|m| m.glo),
        exp: mean(&|m| m.exp),
        dglo: gt.map(|_| mean(&|m| m.dglo.unwrap())),
        dexp: gt.map(|_| mean(&|m| m.dexp.unwrap())),
    })
}
