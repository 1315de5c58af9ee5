//! Test-time adaptation: the dual-pathway coherence objective plus the
//! statistics-only and entropy-minimization baselines, all driven by a single
//! offline pass over the corrupted test set.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Param, ReduceKind, Tensor};
use crate::data::{batch_from_samples, dense_sample, subseed, uniform_sample, LabeledDataset};
use crate::error::{Result, TecoError};
use crate::model::VideoClassifier;
use crate::nn::StatMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Standard,
    Bn,
    Tent,
    Shot,
    Teco,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Standard,
        Method::Bn,
        Method::Tent,
        Method::Shot,
        Method::Teco,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Bn => "bn",
            Method::Tent => "tent",
            Method::Shot => "shot",
            Method::Teco => "teco",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Method::Standard),
            "bn" => Ok(Method::Bn),
            "tent" => Ok(Method::Tent),
            "shot" => Ok(Method::Shot),
            "teco" => Ok(Method::Teco),
            other => Err(TecoError::UnknownCorruption(format!(
                "unknown method: {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    L1,
    L2,
}

impl FromStr for Distance {
    type Err = TecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            other => Err(TecoError::UnknownCorruption(format!(
                "unknown distance: {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub method: Method,
    pub alpha: f32,
    pub beta: f32,
    pub lambda: f32,
    pub lr: f32,
    /// multiplier on `lr` for non-affine updatable weights (teco's shallow
    /// conv and attention parameters); norm affine always uses `lr` itself
    pub weight_lr_scale: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub time_gap: usize,
    pub distance: Distance,
    pub coherence_stage: usize,
    pub split_index: usize,
    pub k_global: usize,
    pub k_local: usize,
    pub stride_local: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            method: Method::Teco,
            alpha: 0.4,
            beta: 1.0,
            lambda: 0.3,
            lr: 0.005,
            weight_lr_scale: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 1,
            time_gap: 1,
            distance: Distance::L1,
            coherence_stage: 2,
            split_index: 2,
            k_global: 4,
            k_local: 4,
            stride_local: 1,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TecoError::OutOfRange {
                what: "alpha",
                range: "[0, 1]",
                value: self.alpha as f64,
            });
        }
        for (what, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("weight_lr_scale", self.weight_lr_scale),
        ] {
            if !(v >= 0.0) {
                return Err(TecoError::OutOfRange {
                    what,
                    range: "[0, inf)",
                    value: v as f64,
                });
            }
        }
        if self.time_gap == 0 || self.time_gap >= self.k_local {
            return Err(TecoError::BadTimeGap {
                gap: self.time_gap,
                t: self.k_local,
            });
        }
        Ok(())
    }
}

/// Mean Shannon entropy of probability rows. Zero entries contribute zero.
pub fn entropy(probs: &Tensor) -> Result<f32> {
    let s = probs.shape();
    if s.len() != 2 {
        return Err(TecoError::RankMismatch {
            expected: 2,
            shape: s.to_vec(),
        });
    }
    let (rows, cols) = (s[0], s[1]);
    let mut total = 0.0f32;
    for r in 0..rows {
        for c in 0..cols {
            let p = probs.data()[r * cols + c];
            if p < 0.0 {
                return Err(TecoError::OutOfRange {
                    what: "probability",
                    range: "[0, 1]",
                    value: p as f64,
                });
            }
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok(total / rows as f32)
}

/// Differentiable mean row entropy of softmaxed logits:
/// H = −mean_rows Σ softmax(x)·log_softmax(x).
pub fn entropy_from_logits(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let rows = g.value(logits).shape()[0];
    let sm = g.softmax(logits, 1)?;
    let lsm = g.log_softmax(logits, 1)?;
    let prod = g.mul(sm, lsm)?;
    let sum = g.reduce(ReduceKind::Sum, prod, &[0, 1])?;
    Ok(g.scale(sum, -1.0 / rows as f32))
}

/// Entropy of the global pathway's predictions.
pub fn loss_ent(
    model: &mut VideoClassifier,
    g: &mut Graph,
    batch_global: &Tensor,
    mode: StatMode,
) -> Result<NodeId> {
    let logits = model.forward_global(g, batch_global, mode)?;
    entropy_from_logits(g, logits)
}

/// Temporal coherence penalty: sum over t of the mean-per-element distance
/// between attention-refined feature slices z^t and z^{t−i}.
pub fn loss_att_co(
    model: &mut VideoClassifier,
    g: &mut Graph,
    batch_local: &Tensor,
    time_gap: usize,
    distance: Distance,
) -> Result<NodeId> {
    let z = model.forward_local_features(g, batch_local, StatMode::Blended)?;
    coherence_penalty(g, z, time_gap, distance)
}

/// The coherence sum over an already-computed feature tensor [N,C,T,H,W].
pub fn coherence_penalty(
    g: &mut Graph,
    z: NodeId,
    time_gap: usize,
    distance: Distance,
) -> Result<NodeId> {
    let t_len = g.value(z).shape()[2];
    if time_gap == 0 || time_gap >= t_len {
        return Err(TecoError::BadTimeGap {
            gap: time_gap,
            t: t_len,
        });
    }
    let mut total: Option<NodeId> = None;
    for t in time_gap..t_len {
        let a = g.slice_time(z, t)?;
        let b = g.slice_time(z, t - time_gap)?;
        let d = g.sub(a, b)?;
        let m = match distance {
            Distance::L1 => {
                let ad = g.abs(d);
                g.reduce(ReduceKind::Mean, ad, &[0, 1, 2, 3])?
            }
            Distance::L2 => {
                let sq = g.mul(d, d)?;
                g.reduce(ReduceKind::Mean, sq, &[0, 1, 2, 3])?
            }
        };
        total = Some(match total {
            Some(acc) => g.add(acc, m)?,
            None => m,
        });
    }
    Ok(total.expect("time_gap < t_len guarantees at least one term"))
}

/// L = L_ent + β·L_att-co. β = 0 skips the local pathway entirely, so the
/// result is bitwise equal to `loss_ent` alone.
pub fn total_loss(
    model: &mut VideoClassifier,
    g: &mut Graph,
    batch_global: &Tensor,
    batch_local: &Tensor,
    cfg: &AdaptationConfig,
) -> Result<NodeId> {
    if cfg.beta == 0.0 {
        return loss_ent(model, g, batch_global, StatMode::Blended);
    }
    // local first: the frozen evaluation statistics then come from the
    // global batch, matching the BN baseline when lr = 0
    let co = loss_att_co(model, g, batch_local, cfg.time_gap, cfg.distance)?;
    let ent = loss_ent(model, g, batch_global, StatMode::Blended)?;
    let weighted = g.scale(co, cfg.beta);
    g.add(ent, weighted)
}

/// Mean negative log-likelihood of the given labels.
pub fn cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    num_classes: usize,
) -> Result<NodeId> {
    let rows = g.value(logits).shape()[0];
    debug_assert_eq!(rows, labels.len());
    let mut onehot = vec![0.0f32; rows * num_classes];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * num_classes + l] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![rows, num_classes], onehot)?);
    let lsm = g.log_softmax(logits, 1)?;
    let picked = g.mul(lsm, mask)?;
    let sum = g.reduce(ReduceKind::Sum, picked, &[0, 1])?;
    Ok(g.scale(sum, -1.0 / rows as f32))
}

/// Hard argmax per row; ties resolve to the lowest index.
pub fn shot_pseudo_labels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (rows, cols) = (s[0], s[1]);
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// SGD with classical momentum: v ← m·v + g; w ← w − lr·v.
pub struct SgdMomentum {
    velocity: Vec<Vec<f32>>,
    momentum: f32,
}

impl SgdMomentum {
    pub fn new(params: &[Param], momentum: f32) -> Self {
        SgdMomentum {
            velocity: params.iter().map(|p| vec![0.0; p.value().numel()]).collect(),
            momentum,
        }
    }

    pub fn step(&mut self, params: &[Param], lr: f32) -> Result<()> {
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            Self::step_one(p, v, self.momentum, lr)?;
        }
        Ok(())
    }

    /// Like `step` but with one learning rate per parameter (parameter
    /// groups); `lrs` must align with `params`.
    pub fn step_per_param(&mut self, params: &[Param], lrs: &[f32]) -> Result<()> {
        debug_assert_eq!(params.len(), lrs.len());
        for ((p, v), &lr) in params.iter().zip(self.velocity.iter_mut()).zip(lrs) {
            Self::step_one(p, v, self.momentum, lr)?;
        }
        Ok(())
    }

    fn step_one(p: &Param, v: &mut [f32], momentum: f32, lr: f32) -> Result<()> {
        let grad = p
            .grad()
            .ok_or_else(|| TecoError::MissingGrad(p.name()))?;
        let mut w = p.value_mut();
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdaptReport {
    /// mean prediction entropy per optimization batch, pre-update
    pub step_entropies: Vec<f32>,
    /// optimized loss value per batch
    pub step_losses: Vec<f32>,
}

/// One offline pass (default: a single epoch) over the corrupted test set in
/// seed-shuffled batch order. Returns with parameters frozen and evaluation
/// statistics fixed from the final adaptation batch.
pub fn adapt_offline(
    model: &mut VideoClassifier,
    test_set: &LabeledDataset,
    cfg: &AdaptationConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    if test_set.clips.is_empty() {
        return Err(TecoError::EmptyDataset);
    }
    if cfg.method != Method::Standard && cfg.batch_size < 2 {
        return Err(TecoError::BatchTooSmall {
            count: cfg.batch_size,
        });
    }
    let mut report = AdaptReport::default();

    if cfg.method == Method::Standard {
        for n in model.norm_layers_mut() {
            n.freeze_eval_stats(StatMode::SourceOnly);
        }
        return Ok(report);
    }

    for n in model.norm_layers_mut() {
        n.stats.alpha = cfg.alpha;
    }
    let stats_mode = match cfg.method {
        Method::Tent => StatMode::TestOnly,
        _ => StatMode::Blended,
    };

    // beta == 0 disables the local pathway entirely (the w/o-l-path ablation),
    // so the attention module is neither attached nor updated: it would never
    // appear in the loss graph and could not receive a gradient.
    let local_path = cfg.method == Method::Teco && cfg.beta != 0.0;
    if local_path && model.attention.is_none() {
        model.attach_attention(cfg.seed);
    }
    let updatable: Vec<Param> = match cfg.method {
        Method::Bn => Vec::new(),
        Method::Tent | Method::Shot => {
            model.partition_parameters(0)?.deep_norm_affine
        }
        Method::Teco => {
            let parts = model.partition_parameters(cfg.split_index)?;
            if local_path {
                parts.updatable()
            } else {
                parts
                    .updatable()
                    .into_iter()
                    .filter(|p| !p.name().starts_with("attn."))
                    .collect()
            }
        }
        Method::Standard => unreachable!(),
    };
    let all_params = model.params();
    // norm affine parameters take the full lr; heavier weights (shallow conv,
    // attention projections) take a scaled-down lr so entropy minimization
    // cannot tear up the learned features in a single pass
    let lrs: Vec<f32> = updatable
        .iter()
        .map(|p| {
            let n = p.name();
            if n.ends_with(".gamma") || n.ends_with(".shift") {
                cfg.lr
            } else {
                cfg.lr * cfg.weight_lr_scale
            }
        })
        .collect();
    let mut opt = SgdMomentum::new(&updatable, cfg.momentum);

    let mut order: Vec<usize> = (0..test_set.clips.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(subseed(cfg.seed, &[10, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut global = Vec::with_capacity(chunk.len());
            let mut local = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                let clip = &test_set.clips[ci];
                let sseed = subseed(cfg.seed, &[11, epoch as u64, ci as u64]);
                global.push(uniform_sample(
                    clip,
                    cfg.k_global.min(clip.len()),
                    false,
                    sseed,
                )?);
                if cfg.method == Method::Teco && cfg.beta != 0.0 {
                    local.push(dense_sample(
                        clip,
                        cfg.k_local.min(clip.len()),
                        cfg.stride_local,
                        false,
                        subseed(sseed, &[1]),
                    )?);
                }
            }
            let batch_g = batch_from_samples(&global);

            let mut g = Graph::new();
            if cfg.method == Method::Bn {
                // statistics only: the forward pass updates μ_t, σ_t²
                let logits = model.forward_global(&mut g, &batch_g, stats_mode)?;
                let sm = g.softmax(logits, 1)?;
                report.step_entropies.push(entropy(g.value(sm))?);
                report.step_losses.push(0.0);
                continue;
            }
            let (loss, ent_node) = match cfg.method {
                Method::Tent => {
                    let ent = loss_ent(model, &mut g, &batch_g, stats_mode)?;
                    (ent, ent)
                }
                Method::Shot => {
                    let logits = model.forward_global(&mut g, &batch_g, stats_mode)?;
                    let labels = shot_pseudo_labels(g.value(logits));
                    let ent = entropy_from_logits(&mut g, logits)?;
                    let ce = cross_entropy(&mut g, logits, &labels, model.num_classes)?;
                    let ce_w = g.scale(ce, cfg.lambda);
                    (g.add(ent, ce_w)?, ent)
                }
                Method::Teco => {
                    if cfg.beta != 0.0 {
                        let batch_l = batch_from_samples(&local);
                        // local first: frozen evaluation statistics then come
                        // from the global batch, matching BN when lr = 0
                        let co =
                            loss_att_co(model, &mut g, &batch_l, cfg.time_gap, cfg.distance)?;
                        let ent = loss_ent(model, &mut g, &batch_g, stats_mode)?;
                        let co_w = g.scale(co, cfg.beta);
                        (g.add(ent, co_w)?, ent)
                    } else {
                        let ent = loss_ent(model, &mut g, &batch_g, stats_mode)?;
                        (ent, ent)
                    }
                }
                _ => unreachable!(),
            };
            report.step_losses.push(g.value(loss).item());
            report.step_entropies.push(g.value(ent_node).item());
            g.backward(loss)?;
            opt.step_per_param(&updatable, &lrs)?;
            for p in &all_params {
                p.zero_grad();
            }
        }
    }

    for n in model.norm_layers_mut() {
        n.freeze_eval_stats(stats_mode);
    }
    Ok(report)
}
