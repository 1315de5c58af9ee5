//! Parameterized corruption suite: 9 kinds x 5 severities over video clips.
//!
//! Severity tables are this crate's own calibration; they are strictly
//! monotone per kind and severity 0 is the identity. Every corruption is a
//! pure function of (spec, clip).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{subseed, LabeledDataset, VideoClip, CHANNELS, FRAME_SIZE};
use crate::error::{Result, TecoError};
use crate::nn::sample_standard_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    MotionBlur,
    Contrast,
    Saturate,
    Fog,
    Rain,
    FrameRate,
    BitError,
}

pub const ALL_KINDS: [CorruptionKind; 9] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::MotionBlur,
    CorruptionKind::Contrast,
    CorruptionKind::Saturate,
    CorruptionKind::Fog,
    CorruptionKind::Rain,
    CorruptionKind::FrameRate,
    CorruptionKind::BitError,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Rain => "rain",
            CorruptionKind::FrameRate => "frame_rate",
            CorruptionKind::BitError => "bit_error",
        }
    }

    /// Severity-indexed scalar parameter, s in 1..=5.
    pub fn theta(&self, severity: u32) -> f32 {
        let i = severity as usize - 1;
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26][i],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0][i],
            CorruptionKind::MotionBlur => [2.0, 3.0, 4.0, 6.0, 8.0][i],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15][i],
            CorruptionKind::Saturate => [0.2, 0.4, 0.6, 0.8, 1.0][i],
            CorruptionKind::Fog => [0.1, 0.2, 0.3, 0.45, 0.6][i],
            CorruptionKind::Rain => [5.0, 10.0, 20.0, 35.0, 60.0][i],
            CorruptionKind::FrameRate => [4.0 / 3.0, 2.0, 8.0 / 3.0, 4.0, 8.0][i],
            CorruptionKind::BitError => [4.0, 8.0, 16.0, 32.0, 64.0][i],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = TecoError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TecoError::UnknownCorruption(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u32,
    pub seed: u64,
}

fn clamp_unit(data: &mut [f32]) {
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Knuth Poisson sampler; means here are at most ~60.
fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut k = 0u64;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

pub fn apply(spec: &CorruptionSpec, clip: &VideoClip) -> Result<VideoClip> {
    if spec.severity > 5 {
        return Err(TecoError::BadSeverity(spec.severity));
    }
    if spec.severity == 0 {
        return Ok(clip.clone());
    }
    let theta = spec.kind.theta(spec.severity);
    let t_len = clip.len();
    let frame_len = CHANNELS * FRAME_SIZE * FRAME_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = clip.frames.data().to_vec();

    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in data.iter_mut() {
                *v += theta * sample_standard_normal(&mut rng);
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::ShotNoise => {
            let scale = theta as f64;
            for v in data.iter_mut() {
                *v = (sample_poisson(&mut rng, *v as f64 * scale) as f64 / scale) as f32;
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::MotionBlur => {
            let window = theta as usize;
            let lead = (window - 1) / 2;
            let src = clip.frames.data();
            let inv = 1.0 / window as f32;
            for t in 0..t_len {
                for i in 0..frame_len {
                    let mut acc = 0.0f32;
                    for w in 0..window {
                        let ti = (t + w).saturating_sub(lead).min(t_len - 1);
                        acc += src[ti * frame_len + i];
                    }
                    data[t * frame_len + i] = acc * inv;
                }
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::Contrast => {
            let mut mean = 0.0f32;
            for v in data.iter() {
                mean += v;
            }
            mean /= data.len() as f32;
            for v in data.iter_mut() {
                *v = mean + theta * (*v - mean);
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::Saturate => {
            let hw = FRAME_SIZE * FRAME_SIZE;
            for t in 0..t_len {
                let base = t * frame_len;
                for p in 0..hw {
                    let mut gray = 0.0f32;
                    for c in 0..CHANNELS {
                        gray += data[base + c * hw + p];
                    }
                    gray /= CHANNELS as f32;
                    for c in 0..CHANNELS {
                        let v = &mut data[base + c * hw + p];
                        *v = gray + (1.0 + theta) * (*v - gray);
                    }
                }
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::Fog => {
            for v in data.iter_mut() {
                *v = (1.0 - theta) * *v + theta;
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::Rain => {
            let streaks = theta as usize;
            let hw = FRAME_SIZE * FRAME_SIZE;
            for t in 0..t_len {
                let base = t * frame_len;
                for _ in 0..streaks {
                    let x0 = rng.gen_range(0..FRAME_SIZE as i32);
                    let y0 = rng.gen_range(0..FRAME_SIZE as i32);
                    let len = rng.gen_range(6..=10);
                    let slope = rng.gen_range(-0.4..0.4f32);
                    let bright = rng.gen_range(0.8..1.0f32);
                    for s in 0..len {
                        let y = y0 + s;
                        let x = x0 + (slope * s as f32).round() as i32;
                        if y < 0 || y >= FRAME_SIZE as i32 || x < 0 || x >= FRAME_SIZE as i32 {
                            continue;
                        }
                        let p = y as usize * FRAME_SIZE + x as usize;
                        for c in 0..CHANNELS {
                            let v = &mut data[base + c * hw + p];
                            *v = 0.5 * *v + 0.5 * bright;
                        }
                    }
                }
            }
            clamp_unit(&mut data);
        }
        CorruptionKind::FrameRate => {
            // drop frames by the rate factor, then repeat back to T;
            // endpoint-preserving nearest-neighbor resampling both ways
            let kept = ((t_len as f32 / theta).round() as usize).max(2);
            let src = clip.frames.data();
            let kept_idx: Vec<usize> = (0..kept)
                .map(|k| {
                    ((k as f32 * (t_len - 1) as f32 / (kept - 1) as f32).round()) as usize
                })
                .collect();
            for t in 0..t_len {
                let k = (t as f32 * (kept - 1) as f32 / (t_len - 1) as f32).round() as usize;
                let si = kept_idx[k];
                if si != t {
                    let (dst_off, src_off) = (t * frame_len, si * frame_len);
                    data[dst_off..dst_off + frame_len]
                        .copy_from_slice(&src[src_off..src_off + frame_len]);
                }
            }
        }
        CorruptionKind::BitError => {
            let blocks = theta as usize;
            let hw = FRAME_SIZE * FRAME_SIZE;
            let span = spec.severity as usize;
            for _ in 0..blocks {
                let t0 = rng.gen_range(0..t_len);
                let bx = rng.gen_range(0..FRAME_SIZE - 3);
                let by = rng.gen_range(0..FRAME_SIZE - 3);
                for t in t0..(t0 + 1 + span).min(t_len) {
                    let base = t * frame_len;
                    for c in 0..CHANNELS {
                        for dy in 0..4 {
                            for dx in 0..4 {
                                let p = (by + dy) * FRAME_SIZE + bx + dx;
                                let v = &mut data[base + c * hw + p];
                                *v = 1.0 - *v;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(VideoClip {
        frames: Tensor::new(clip.frames.shape().to_vec(), data)?,
        label: clip.label,
    })
}

/// Corrupt a whole dataset cell-by-cell with independent sub-seeds per
/// (kind, severity, clip index), so any cell is reproducible in isolation.
pub fn corrupt_dataset(
    dataset: &LabeledDataset,
    kinds: &[CorruptionKind],
    severities: &[u32],
    seed: u64,
) -> Result<Vec<((CorruptionKind, u32), LabeledDataset)>> {
    let mut out = Vec::with_capacity(kinds.len() * severities.len());
    for &kind in kinds {
        // stable kind id, so a cell's seeds do not depend on the request order
        let kid = ALL_KINDS.iter().position(|&k| k == kind).unwrap() as u64;
        for &severity in severities {
            let mut clips = Vec::with_capacity(dataset.clips.len());
            for (ci, clip) in dataset.clips.iter().enumerate() {
                let spec = CorruptionSpec {
                    kind,
                    severity,
                    seed: subseed(seed, &[kid, severity as u64, ci as u64]),
                };
                clips.push(apply(&spec, clip)?);
            }
            out.push((
                (kind, severity),
                LabeledDataset {
                    clips,
                    num_classes: dataset.num_classes,
                },
            ));
        }
    }
    Ok(out)
}

/// Mean per-pixel L1 distance between two clips.
pub fn mean_l1(a: &VideoClip, b: &VideoClip) -> f32 {
    let n = a.frames.numel();
    let mut acc = 0.0f64;
    for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
        acc += (x - y).abs() as f64;
    }
    (acc / n as f64) as f32
}
