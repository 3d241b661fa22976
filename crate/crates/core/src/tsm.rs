//! Temporal segment module.
//!
//! The raw motion-frame buffer (index 0 = frame closest to the current clip)
//! is split into `segments` consecutive segments; segment `k` covers
//! `stride * ratio^k` raw frames and is reduced to `stride` slots, each
//! standing for a bucket of `ratio^k` contiguous raw frames. Slot `i` of the
//! output reads raw frame
//!
//! ```text
//! sum_{j<k} ratio^j * stride + ratio^k * (i mod stride),   k = i / stride
//! ```
//!
//! under uniform sampling.

use std::ops::Range;

use candle_core::Tensor;
use rand::Rng;

use crate::config::{AbstractionStrategy, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSchedule {
    pub stride: usize,
    pub expand_ratio: usize,
    pub segments: usize,
    pub strategy: AbstractionStrategy,
    /// Representative raw index per slot, strictly increasing.
    pub indices: Vec<usize>,
    /// Segment number `k = i / stride` per slot.
    pub segment_of: Vec<usize>,
    /// Raw frames each slot stands for.
    pub buckets: Vec<Range<usize>>,
}

impl SegmentSchedule {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Total raw frames covered by all buckets.
    pub fn coverage(&self) -> usize {
        self.buckets.last().map_or(0, |b| b.end)
    }

    /// Per-slot validity given per-raw-frame validity. A slot is valid when
    /// any raw frame it reads is valid.
    pub fn slot_validity(&self, raw_validity: &[bool]) -> Vec<bool> {
        let valid = |j: usize| raw_validity.get(j).copied().unwrap_or(false);
        match self.strategy {
            AbstractionStrategy::Mean => self.buckets.iter().map(|b| b.clone().any(valid)).collect(),
            _ => self.indices.iter().map(|&j| valid(j)).collect(),
        }
    }
}

/// Builds the slot-to-raw-frame map for `motion_frame_len` available frames.
///
/// `rng` is required for [`AbstractionStrategy::Random`] and ignored otherwise.
pub fn build_schedule<R: Rng + ?Sized>(
    stride: usize,
    expand_ratio: usize,
    segments: usize,
    motion_frame_len: usize,
    strategy: AbstractionStrategy,
    rng: Option<&mut R>,
) -> Result<SegmentSchedule> {
    if stride == 0 || expand_ratio == 0 || segments == 0 {
        return Err(Error::Format(format!(
            "segment schedule needs positive stride/ratio/segments, got {stride}/{expand_ratio}/{segments}"
        )));
    }
    let slots = stride * segments;
    let mut indices = Vec::with_capacity(slots);
    let mut segment_of = Vec::with_capacity(slots);
    let mut buckets = Vec::with_capacity(slots);

    let mut seg_start = 0usize;
    let mut step = 1usize;
    for k in 0..segments {
        for m in 0..stride {
            let start = seg_start + step * m;
            buckets.push(start..start + step);
            segment_of.push(k);
            indices.push(start);
        }
        seg_start += stride * step;
        step = step
            .checked_mul(expand_ratio)
            .ok_or_else(|| Error::Format("segment size overflows usize".into()))?;
    }

    let max_index = match strategy {
        AbstractionStrategy::Uniform => *indices.last().unwrap(),
        AbstractionStrategy::Mean | AbstractionStrategy::Random => buckets.last().unwrap().end - 1,
    };
    if max_index >= motion_frame_len {
        return Err(Error::ScheduleOverrun {
            max_index,
            available: motion_frame_len,
        });
    }

    if strategy == AbstractionStrategy::Random {
        let rng = rng.ok_or_else(|| Error::Format("random abstraction requires an RNG".into()))?;
        for (idx, b) in indices.iter_mut().zip(&buckets) {
            *idx = rng.random_range(b.clone());
        }
    }

    Ok(SegmentSchedule {
        stride,
        expand_ratio,
        segments,
        strategy,
        indices,
        segment_of,
        buckets,
    })
}

/// Deterministic schedule for a config (uniform or mean strategies; random
/// strategy callers should use [`build_schedule`] with their own RNG).
pub fn schedule_for(cfg: &ModelConfig) -> Result<SegmentSchedule> {
    build_schedule::<rand_chacha::ChaCha8Rng>(
        cfg.tsm_stride,
        cfg.tsm_expand_ratio,
        cfg.tsm_segments,
        cfg.motion_frame_len,
        match cfg.tsm_strategy {
            AbstractionStrategy::Random => AbstractionStrategy::Uniform,
            s => s,
        },
        None,
    )
}

/// Gathers abstracted motion frames `[slots, C, h, w]` from raw motion frames
/// `[M, C, h, w]`.
pub fn abstract_motion_frames(motion_frames: &Tensor, schedule: &SegmentSchedule) -> Result<Tensor> {
    let dims = motion_frames.dims();
    if dims.is_empty() {
        return Err(Error::shape("motion frames", &[schedule.coverage()], dims));
    }
    let needed = match schedule.strategy {
        AbstractionStrategy::Mean => schedule.coverage(),
        _ => schedule.indices.last().map_or(0, |i| i + 1),
    };
    if dims[0] < needed {
        let mut expected = dims.to_vec();
        expected[0] = needed;
        return Err(Error::shape("motion frames", &expected, dims));
    }
    let out = match schedule.strategy {
        AbstractionStrategy::Mean => {
            let slots = schedule
                .buckets
                .iter()
                .map(|b| motion_frames.narrow(0, b.start, b.len())?.mean_keepdim(0))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::cat(&slots, 0)?
        }
        _ => {
            let idx: Vec<u32> = schedule.indices.iter().map(|&i| i as u32).collect();
            let idx = Tensor::new(idx.as_slice(), motion_frames.device())?;
            motion_frames.index_select(&idx, 0)?
        }
    };
    Ok(out)
}
