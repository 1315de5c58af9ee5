//! Procedural synthetic video dataset and the two frame-sampling strategies.
//!
//! Eight classes: {circle, square} x {right, left, up, down}. Each clip is a
//! bright anti-aliased shape translating at 1-2 px/frame over a dim textured
//! background, so the task mixes a spatial cue (shape) with a temporal cue
//! (motion direction).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Result, TecoError};

pub const FRAME_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const DEFAULT_CLIP_LEN: usize = 16;
pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; 8] = [
    "circle-right",
    "circle-left",
    "circle-up",
    "circle-down",
    "square-right",
    "square-left",
    "square-up",
    "square-down",
];

/// Frames are [T, 3, H, W], values in [0, 1].
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub clips: Vec<VideoClip>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Global,
    Local,
}

/// Frames are [K, 3, H, W]; indices refer back into the source clip.
#[derive(Clone, Debug)]
pub struct SampledClip {
    pub frames: Tensor,
    pub source_indices: Vec<usize>,
    pub pathway: Pathway,
}

/// Deterministic sub-seed derivation (splitmix64 over the parts).
pub fn subseed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        x = z ^ (z >> 31);
    }
    x
}

fn bilinear_texture(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Vec<f32> {
    // 5x5 random grid upsampled to FRAME_SIZE x FRAME_SIZE, per channel
    const G: usize = 5;
    let mut grid = [[[0.0f32; G]; G]; CHANNELS];
    for c in grid.iter_mut() {
        for row in c.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    }
    let mut out = vec![0.0f32; CHANNELS * FRAME_SIZE * FRAME_SIZE];
    let scale = (G - 1) as f32 / (FRAME_SIZE - 1) as f32;
    for c in 0..CHANNELS {
        for y in 0..FRAME_SIZE {
            let fy = y as f32 * scale;
            let y0 = fy as usize;
            let y1 = (y0 + 1).min(G - 1);
            let wy = fy - y0 as f32;
            for x in 0..FRAME_SIZE {
                let fx = x as f32 * scale;
                let x0 = fx as usize;
                let x1 = (x0 + 1).min(G - 1);
                let wx = fx - x0 as f32;
                let v = grid[c][y0][x0] * (1.0 - wy) * (1.0 - wx)
                    + grid[c][y0][x1] * (1.0 - wy) * wx
                    + grid[c][y1][x0] * wy * (1.0 - wx)
                    + grid[c][y1][x1] * wy * wx;
                out[(c * FRAME_SIZE + y) * FRAME_SIZE + x] = v;
            }
        }
    }
    out
}

fn shape_coverage(is_circle: bool, dx: f32, dy: f32, radius: f32) -> f32 {
    if is_circle {
        (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0)
    } else {
        let ex = radius + 0.5 - dx.abs();
        let ey = radius + 0.5 - dy.abs();
        ex.min(ey).clamp(0.0, 1.0)
    }
}

fn render_clip(label: usize, t_len: usize, rng: &mut ChaCha8Rng) -> VideoClip {
    let is_circle = label < 4;
    let dir = label % 4; // 0 right, 1 left, 2 up, 3 down
    let fs = FRAME_SIZE as f32;

    let bg = bilinear_texture(rng, 0.10, 0.55);
    let fg: [f32; 3] = [
        rng.gen_range(0.75..1.0),
        rng.gen_range(0.75..1.0),
        rng.gen_range(0.75..1.0),
    ];
    let radius = rng.gen_range(4.0..5.5f32);
    let travel = (t_len - 1) as f32;
    let max_speed = ((fs - 2.0 - 2.0 * radius) / travel).min(2.0);
    let speed = rng.gen_range(1.0..max_speed.max(1.0001));
    let span = fs - 2.0 - 2.0 * radius - speed * travel;
    let along0 = radius + 1.0 + rng.gen_range(0.0..span.max(1e-3));
    let across = radius + 1.0 + rng.gen_range(0.0..(fs - 2.0 - 2.0 * radius).max(1e-3));

    let mut data = vec![0.0f32; t_len * CHANNELS * FRAME_SIZE * FRAME_SIZE];
    for t in 0..t_len {
        let along = along0 + speed * t as f32;
        let (cx, cy) = match dir {
            0 => (along, across),
            1 => (fs - 1.0 - along, across),
            2 => (across, fs - 1.0 - along),
            _ => (across, along),
        };
        for c in 0..CHANNELS {
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    let a = shape_coverage(is_circle, x as f32 - cx, y as f32 - cy, radius);
                    let b = bg[(c * FRAME_SIZE + y) * FRAME_SIZE + x];
                    let v = b * (1.0 - a) + fg[c] * a;
                    data[((t * CHANNELS + c) * FRAME_SIZE + y) * FRAME_SIZE + x] =
                        v.clamp(0.0, 1.0);
                }
            }
        }
    }
    VideoClip {
        frames: Tensor::new(
            vec![t_len, CHANNELS, FRAME_SIZE, FRAME_SIZE],
            data,
        )
        .expect("render buffer matches shape"),
        label,
    }
}

/// Deterministic given `seed`; each clip draws from an independent sub-seed.
pub fn generate_dataset(clips_per_class: usize, t_len: usize, seed: u64) -> Result<LabeledDataset> {
    if clips_per_class == 0 {
        return Err(TecoError::EmptyDataset);
    }
    let mut clips = Vec::with_capacity(NUM_CLASSES * clips_per_class);
    for label in 0..NUM_CLASSES {
        for idx in 0..clips_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(subseed(seed, &[label as u64, idx as u64]));
            clips.push(render_clip(label, t_len, &mut rng));
        }
    }
    Ok(LabeledDataset {
        clips,
        num_classes: NUM_CLASSES,
    })
}

fn gather_frames(clip: &VideoClip, indices: &[usize]) -> Tensor {
    let t = clip.len();
    let frame_len = CHANNELS * FRAME_SIZE * FRAME_SIZE;
    debug_assert_eq!(clip.frames.numel(), t * frame_len);
    let mut data = Vec::with_capacity(indices.len() * frame_len);
    for &i in indices {
        data.extend_from_slice(&clip.frames.data()[i * frame_len..(i + 1) * frame_len]);
    }
    Tensor::new(
        vec![indices.len(), CHANNELS, FRAME_SIZE, FRAME_SIZE],
        data,
    )
    .expect("gathered frames match shape")
}

/// Split the clip into K equal segments and take one frame from each:
/// the segment center in deterministic mode, a uniform draw otherwise.
pub fn uniform_sample(
    clip: &VideoClip,
    k: usize,
    deterministic: bool,
    seed: u64,
) -> Result<SampledClip> {
    let t = clip.len();
    if k == 0 || k > t {
        return Err(TecoError::SampleTooLong { k, stride: 1, t });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * t / k;
        let hi = (s + 1) * t / k; // exclusive
        let idx = if deterministic {
            lo + (hi - lo) / 2
        } else {
            rng.gen_range(lo..hi)
        };
        indices.push(idx);
    }
    Ok(SampledClip {
        frames: gather_frames(clip, &indices),
        source_indices: indices,
        pathway: Pathway::Global,
    })
}

/// Consecutive frames with fixed stride: centered window in deterministic
/// mode, uniformly random start otherwise.
pub fn dense_sample(
    clip: &VideoClip,
    k: usize,
    stride: usize,
    deterministic: bool,
    seed: u64,
) -> Result<SampledClip> {
    let t = clip.len();
    if k == 0 || stride == 0 || k * stride > t {
        return Err(TecoError::SampleTooLong { k, stride, t });
    }
    let slack = t - k * stride;
    let start = if deterministic {
        slack / 2
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.gen_range(0..=slack)
    };
    let indices: Vec<usize> = (0..k).map(|i| start + i * stride).collect();
    Ok(SampledClip {
        frames: gather_frames(clip, &indices),
        source_indices: indices,
        pathway: Pathway::Local,
    })
}

/// Stack sampled clips into a model batch [B, 3, K, H, W].
pub fn batch_from_samples(samples: &[SampledClip]) -> Tensor {
    let b = samples.len();
    let k = samples[0].frames.shape()[0];
    let hw = FRAME_SIZE * FRAME_SIZE;
    let mut data = vec![0.0f32; b * CHANNELS * k * hw];
    for (bi, s) in samples.iter().enumerate() {
        let src = s.frames.data(); // [K, C, H, W]
        for t in 0..k {
            for c in 0..CHANNELS {
                let sbase = (t * CHANNELS + c) * hw;
                let dbase = ((bi * CHANNELS + c) * k + t) * hw;
                data[dbase..dbase + hw].copy_from_slice(&src[sbase..sbase + hw]);
            }
        }
    }
    Tensor::new(vec![b, CHANNELS, k, FRAME_SIZE, FRAME_SIZE], data)
        .expect("batch buffer matches shape")
}

const TVDS_MAGIC: [u8; 4] = *b"TVDS";
const TVDS_VERSION: u32 = 1;

/// Self-describing little-endian binary dataset file.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TVDS_MAGIC)?;
    w.write_all(&TVDS_VERSION.to_le_bytes())?;
    w.write_all(&(ds.clips.len() as u32).to_le_bytes())?;
    for clip in &ds.clips {
        let s = clip.frames.shape();
        w.write_all(&(clip.label as u32).to_le_bytes())?;
        for &d in &[s[0], s[1], s[2], s[3]] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in clip.frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TecoError::Truncated("u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TecoError::Truncated("magic".into()))?;
    if magic != TVDS_MAGIC {
        return Err(TecoError::BadMagic {
            expected: TVDS_MAGIC,
            got: magic,
        });
    }
    let version = read_u32(&mut r)?;
    if version != TVDS_VERSION {
        return Err(TecoError::VersionMismatch {
            expected: TVDS_VERSION,
            got: version,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut clips = Vec::with_capacity(count);
    let mut num_classes = 0usize;
    for _ in 0..count {
        let label = read_u32(&mut r)? as usize;
        let t = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let numel = t * c * h * w;
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)
            .map_err(|_| TecoError::Truncated("clip data".into()))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        num_classes = num_classes.max(label + 1);
        clips.push(VideoClip {
            frames: Tensor::new(vec![t, c, h, w], data)?,
            label,
        });
    }
    Ok(LabeledDataset {
        clips,
        num_classes: num_classes.max(NUM_CLASSES),
    })
}
