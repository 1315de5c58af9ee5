//! Toy residual 3-D conv video classifier: stem, four conv-norm-relu blocks
//! with stride-2 spatial downsampling, global-average-pool linear head, and
//! an optional time-only attention module attached at the coherence stage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{cross_entropy, SgdMomentum};
use crate::autodiff::{Graph, NodeId, Param, ReduceKind, Tensor};
use crate::data::{
    batch_from_samples, subseed, uniform_sample, LabeledDataset, SampledClip, CHANNELS,
    FRAME_SIZE,
};
use crate::error::{Result, TecoError};
use crate::nn::{ConvLayer, NormLayer, Partition, StatMode, TemporalNonLocal};

pub const BLOCK_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const STEM_WIDTH: usize = 8;
const RUNNING_DECAY: f32 = 0.9;

#[derive(Clone, Debug)]
pub struct Block {
    pub conv: ConvLayer,
    pub norm: NormLayer,
    pub proj: ConvLayer,
}

impl Block {
    fn forward(&mut self, g: &mut Graph, x: NodeId, mode: StatMode) -> Result<NodeId> {
        let main = self.conv.forward(g, x)?;
        let main = self.norm.forward(g, main, mode)?;
        let res = self.proj.forward(g, x)?;
        let sum = g.add(main, res)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct VideoClassifier {
    pub stem: ConvLayer,
    pub stem_norm: NormLayer,
    pub blocks: Vec<Block>,
    pub head_w: Param,
    pub head_b: Param,
    pub attention: Option<TemporalNonLocal>,
    pub num_classes: usize,
    pub split_index: usize,
    pub coherence_stage: usize,
}

impl VideoClassifier {
    pub fn new(num_classes: usize, split_index: usize, coherence_stage: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &[0xC0DE]));
        let stem = ConvLayer::new(
            "stem.conv",
            CHANNELS,
            STEM_WIDTH,
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
            true,
            &mut rng,
        );
        let stem_norm = NormLayer::new("stem.norm", STEM_WIDTH);
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = STEM_WIDTH;
        for (i, &c_out) in BLOCK_WIDTHS.iter().enumerate() {
            let conv = ConvLayer::new(
                &format!("block{i}.conv"),
                c_in,
                c_out,
                [3, 3, 3],
                [1, 2, 2],
                [1, 1, 1],
                false,
                &mut rng,
            );
            let norm = NormLayer::new(&format!("block{i}.norm"), c_out);
            let proj = ConvLayer::new(
                &format!("block{i}.proj"),
                c_in,
                c_out,
                [1, 1, 1],
                [1, 2, 2],
                [0, 0, 0],
                false,
                &mut rng,
            );
            blocks.push(Block { conv, norm, proj });
            c_in = c_out;
        }
        let head_w = Param::new(
            "head.weight",
            crate::nn::normal(&[c_in, num_classes], 0.01, &mut rng),
        );
        let head_b = Param::new("head.bias", Tensor::zeros(&[num_classes]));
        VideoClassifier {
            stem,
            stem_norm,
            blocks,
            head_w,
            head_b,
            attention: None,
            num_classes,
            split_index,
            coherence_stage,
        }
    }

    /// Channel width of the feature tap at `coherence_stage`.
    pub fn tap_channels(&self) -> usize {
        if self.coherence_stage == 0 {
            STEM_WIDTH
        } else {
            BLOCK_WIDTHS[self.coherence_stage - 1]
        }
    }

    /// Create the attention module `h` fresh (identity at creation).
    pub fn attach_attention(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &[0xA77E]));
        self.attention = Some(TemporalNonLocal::new("attn", self.tap_channels(), &mut rng));
    }

    /// All parameters in a stable order (attention last, when present).
    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.stem.weight.clone()];
        if let Some(b) = &self.stem.bias {
            v.push(b.clone());
        }
        v.push(self.stem_norm.gamma.clone());
        v.push(self.stem_norm.shift.clone());
        for b in &self.blocks {
            v.push(b.conv.weight.clone());
            v.push(b.norm.gamma.clone());
            v.push(b.norm.shift.clone());
            v.push(b.proj.weight.clone());
        }
        v.push(self.head_w.clone());
        v.push(self.head_b.clone());
        if let Some(a) = &self.attention {
            v.extend(a.params());
        }
        v
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer> {
        let mut v = vec![&mut self.stem_norm];
        v.extend(self.blocks.iter_mut().map(|b| &mut b.norm));
        v
    }

    /// Shallow/deep/frozen split. Blocks `0..split_index` (plus the stem,
    /// when split_index > 0) are fully trainable; past the split only norm
    /// affine parameters update; the head is always frozen; the attention
    /// module rides with the shallow group.
    pub fn partition_parameters(&self, split_index: usize) -> Result<Partition> {
        if split_index > self.blocks.len() {
            return Err(TecoError::SplitOutOfRange {
                index: split_index,
                max: self.blocks.len(),
            });
        }
        let mut p = Partition::default();
        let stem_shallow = split_index > 0;
        if stem_shallow {
            p.shallow.push(self.stem.weight.clone());
            if let Some(b) = &self.stem.bias {
                p.shallow.push(b.clone());
            }
            p.shallow.push(self.stem_norm.gamma.clone());
            p.shallow.push(self.stem_norm.shift.clone());
        } else {
            p.frozen.push(self.stem.weight.clone());
            if let Some(b) = &self.stem.bias {
                p.frozen.push(b.clone());
            }
            p.deep_norm_affine.push(self.stem_norm.gamma.clone());
            p.deep_norm_affine.push(self.stem_norm.shift.clone());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if i < split_index {
                p.shallow.push(b.conv.weight.clone());
                p.shallow.push(b.norm.gamma.clone());
                p.shallow.push(b.norm.shift.clone());
                p.shallow.push(b.proj.weight.clone());
            } else {
                p.frozen.push(b.conv.weight.clone());
                p.frozen.push(b.proj.weight.clone());
                p.deep_norm_affine.push(b.norm.gamma.clone());
                p.deep_norm_affine.push(b.norm.shift.clone());
            }
        }
        p.frozen.push(self.head_w.clone());
        p.frozen.push(self.head_b.clone());
        if let Some(a) = &self.attention {
            p.shallow.extend(a.params());
        }
        Ok(p)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 5 || s[1] != CHANNELS || s[3] != FRAME_SIZE || s[4] != FRAME_SIZE {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Stem + first `upto` blocks.
    fn backbone(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: StatMode,
        upto: usize,
    ) -> Result<NodeId> {
        let mut h = self.stem.forward(g, x)?;
        h = self.stem_norm.forward(g, h, mode)?;
        h = g.relu(h);
        for b in self.blocks[..upto].iter_mut() {
            h = b.forward(g, h, mode)?;
        }
        Ok(h)
    }

    /// Full pathway to logits [B, N].
    pub fn forward_global(
        &mut self,
        g: &mut Graph,
        batch: &Tensor,
        mode: StatMode,
    ) -> Result<NodeId> {
        self.check_batch(batch)?;
        let x = g.constant(batch.clone());
        let n_blocks = self.blocks.len();
        let feat = self.backbone(g, x, mode, n_blocks)?;
        let pooled = g.reduce(ReduceKind::Mean, feat, &[2, 3, 4])?; // [B, C]
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let y = g.matmul(pooled, w)?;
        g.add_row_bias(y, b)
    }

    /// Raw feature tap at the coherence stage, [B, C', T', H', W'].
    pub fn forward_tap(
        &mut self,
        g: &mut Graph,
        batch: &Tensor,
        mode: StatMode,
    ) -> Result<NodeId> {
        self.check_batch(batch)?;
        let x = g.constant(batch.clone());
        self.backbone(g, x, mode, self.coherence_stage)
    }

    /// Tap features refined by the attention module, h(f(I_d)).
    pub fn forward_local_features(
        &mut self,
        g: &mut Graph,
        batch: &Tensor,
        mode: StatMode,
    ) -> Result<NodeId> {
        let tap = self.forward_tap(g, batch, mode)?;
        let t_prime = g.value(tap).shape()[2];
        if t_prime < 2 {
            return Err(TecoError::TimeTooShort {
                t: t_prime,
                min: 2,
            });
        }
        match &self.attention {
            Some(a) => a.forward(g, tap),
            None => Ok(tap),
        }
    }

    /// Independent copy: parameters, statistics and attention are cloned
    /// into fresh storage.
    pub fn deep_clone(&self) -> Self {
        fn clone_param(p: &Param) -> Param {
            Param::new(p.name(), p.value().clone())
        }
        fn clone_conv(c: &ConvLayer) -> ConvLayer {
            ConvLayer {
                weight: clone_param(&c.weight),
                bias: c.bias.as_ref().map(clone_param),
                stride: c.stride,
                pad: c.pad,
                time_edge: c.time_edge,
            }
        }
        fn clone_norm(n: &NormLayer) -> NormLayer {
            NormLayer {
                gamma: clone_param(&n.gamma),
                shift: clone_param(&n.shift),
                stats: n.stats.clone(),
            }
        }
        VideoClassifier {
            stem: clone_conv(&self.stem),
            stem_norm: clone_norm(&self.stem_norm),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv: clone_conv(&b.conv),
                    norm: clone_norm(&b.norm),
                    proj: clone_conv(&b.proj),
                })
                .collect(),
            head_w: clone_param(&self.head_w),
            head_b: clone_param(&self.head_b),
            attention: self.attention.as_ref().map(|a| TemporalNonLocal {
                proj_theta: clone_param(&a.proj_theta),
                proj_phi: clone_param(&a.proj_phi),
                proj_g: clone_param(&a.proj_g),
                scale: a.scale,
            }),
            num_classes: self.num_classes,
            split_index: self.split_index,
            coherence_stage: self.coherence_stage,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub k_frames: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            k_frames: 8,
            augment: true,
            seed: 0,
        }
    }
}

/// Horizontal flip swaps the left/right motion classes.
fn flip_label(label: usize) -> usize {
    match label % 4 {
        0 => label + 1,
        1 => label - 1,
        _ => label,
    }
}

fn flip_horizontal(frames: &mut Tensor) {
    let s = frames.shape().to_vec();
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = frames.data_mut();
    for t in 0..k {
        for ch in 0..c {
            for y in 0..h {
                let row = ((t * c + ch) * h + y) * w;
                data[row..row + w].reverse();
            }
        }
    }
}

/// Random 28x28 crop re-placed at a random offset on a zero canvas.
fn pad_crop(frames: &mut Tensor, rng: &mut ChaCha8Rng) {
    const CROP: usize = 28;
    let s = frames.shape().to_vec();
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    let sy = rng.gen_range(0..=h - CROP);
    let sx = rng.gen_range(0..=w - CROP);
    let dy = rng.gen_range(0..=h - CROP);
    let dx = rng.gen_range(0..=w - CROP);
    let src = frames.data().to_vec();
    let data = frames.data_mut();
    data.fill(0.0);
    for t in 0..k {
        for ch in 0..c {
            for y in 0..CROP {
                let srow = ((t * c + ch) * h + sy + y) * w + sx;
                let drow = ((t * c + ch) * h + dy + y) * w + dx;
                data[drow..drow + CROP].copy_from_slice(&src[srow..srow + CROP]);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epoch_losses: Vec<f32>,
    pub train_accuracy: f32,
}

/// Supervised pretraining with SGD momentum and cosine-annealed lr; per-batch
/// normalization statistics feed an exponential running estimate that becomes
/// the frozen source statistics.
pub fn train_clean(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.clips.is_empty() {
        return Err(TecoError::EmptyDataset);
    }
    let params = model.params();
    let mut opt = SgdMomentum::new(&params, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.clips.len()).collect();
    let total_steps = (cfg.epochs * dataset.clips.len()).div_ceil(cfg.batch_size).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f32;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut samples: Vec<SampledClip> = Vec::with_capacity(chunk.len());
            let mut labels: Vec<usize> = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                let clip = &dataset.clips[ci];
                let sseed = subseed(cfg.seed, &[2, epoch as u64, ci as u64]);
                let mut s = uniform_sample(clip, cfg.k_frames.min(clip.len()), false, sseed)?;
                let mut label = clip.label;
                if cfg.augment {
                    let mut arng = ChaCha8Rng::seed_from_u64(subseed(sseed, &[3]));
                    if arng.gen_bool(0.5) {
                        flip_horizontal(&mut s.frames);
                        label = flip_label(label);
                    }
                    pad_crop(&mut s.frames, &mut arng);
                }
                samples.push(s);
                labels.push(label);
            }
            let batch = batch_from_samples(&samples);
            let mut g = Graph::new();
            let logits = model.forward_global(&mut g, &batch, StatMode::TrainBatch)?;
            for n in model.norm_layers_mut() {
                n.update_source_running(RUNNING_DECAY);
            }
            let loss = cross_entropy(&mut g, logits, &labels, model.num_classes)?;
            let loss_val = g.value(loss).item();
            g.backward(loss)?;
            let lr = cfg.lr
                * 0.5
                * (1.0 + (std::f32::consts::PI * step as f32 / total_steps as f32).cos());
            opt.step(&params, lr)?;
            for p in &params {
                p.zero_grad();
            }
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f32);
    }

    // source statistics are frozen now; they are also the evaluation default
    for n in model.norm_layers_mut() {
        n.freeze_eval_stats(StatMode::SourceOnly);
    }

    let train_accuracy = crate::eval::evaluate(model, dataset, cfg.k_frames)?;
    Ok(TrainReport {
        epoch_losses,
        train_accuracy,
    })
}
