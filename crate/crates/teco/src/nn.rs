//! Neural layers: 3-D conv, dual-statistics normalization, linear head and
//! the time-only non-local attention module, plus parameter-group tagging
//! for partial test-time updates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Param, Tensor};
use crate::error::{Result, TecoError};

/// Which normalization statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StatMode {
    /// Frozen source (training) statistics.
    SourceOnly,
    /// Statistics of the current batch only.
    TestOnly,
    /// Batch statistics with gradients flowing through them (supervised
    /// pretraining); adaptation modes treat statistics as constants instead.
    TrainBatch,
    /// `alpha * source + (1 - alpha) * test-batch`.
    Blended,
    /// Frozen evaluation statistics (source by default, overwritten by the
    /// final adaptation batch).
    Eval,
}

/// Per-channel normalization statistics: source, current test batch, the
/// blend weight, and the frozen evaluation copy.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mu_s: Vec<f32>,
    pub var_s: Vec<f32>,
    pub mu_t: Vec<f32>,
    pub var_t: Vec<f32>,
    pub alpha: f32,
    pub eps: f32,
    pub eval_mu: Vec<f32>,
    pub eval_var: Vec<f32>,
}

impl NormStats {
    pub fn new(channels: usize) -> Self {
        NormStats {
            mu_s: vec![0.0; channels],
            var_s: vec![1.0; channels],
            mu_t: vec![0.0; channels],
            var_t: vec![1.0; channels],
            alpha: 1.0,
            eps: 1e-5,
            eval_mu: vec![0.0; channels],
            eval_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu_s.len()
    }
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: Param,
    pub shift: Param,
    pub stats: NormStats,
}

impl NormLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        NormLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[channels])),
            stats: NormStats::new(channels),
        }
    }

    /// Per-channel mean/variance of a [N,C,T,H,W] batch over all axes but C.
    fn batch_stats(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: s.to_vec(),
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = n * inner;
        if count < 2 {
            return Err(TecoError::BatchTooSmall { count });
        }
        let inv = 1.0 / count as f32;
        let data = x.data();
        let mut mu = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f32;
            for ni in 0..n {
                let base = (ni * c + ch) * inner;
                for v in &data[base..base + inner] {
                    acc += v;
                }
            }
            mu[ch] = acc * inv;
        }
        for ch in 0..c {
            let m = mu[ch];
            let mut acc = 0.0f32;
            for ni in 0..n {
                let base = (ni * c + ch) * inner;
                for v in &data[base..base + inner] {
                    let d = v - m;
                    acc += d * d;
                }
            }
            var[ch] = acc * inv;
        }
        Ok((mu, var))
    }

    /// Normalize with statistics chosen by `mode`. In `TestOnly`/`Blended`
    /// the batch statistics are recomputed, stored in `stats.mu_t/var_t`,
    /// and treated as constants of the graph (no gradient through them).
    pub fn forward(&mut self, g: &mut Graph, x: NodeId, mode: StatMode) -> Result<NodeId> {
        if mode == StatMode::TrainBatch {
            // differentiable batch norm; still records the batch statistics
            // so the running source estimate can be updated
            let count = g.value(x).numel() / self.stats.channels().max(1);
            if count < 2 {
                return Err(TecoError::BatchTooSmall { count });
            }
            let gamma = g.param(&self.gamma);
            let shift = g.param(&self.shift);
            let (y, mu, var) = g.batch_norm(x, gamma, shift, self.stats.eps)?;
            self.stats.mu_t = mu;
            self.stats.var_t = var;
            return Ok(y);
        }
        if matches!(mode, StatMode::TestOnly | StatMode::Blended) {
            let (mu, var) = Self::batch_stats(g.value(x))?;
            self.stats.mu_t = mu;
            self.stats.var_t = var;
        }
        let (mu, var) = self.resolve_stats(mode);
        let gamma = g.param(&self.gamma);
        let shift = g.param(&self.shift);
        g.norm_affine(x, gamma, shift, mu, var, self.stats.eps)
    }

    /// The (mu, var) a forward pass in `mode` would use right now.
    pub fn resolve_stats(&self, mode: StatMode) -> (Vec<f32>, Vec<f32>) {
        let st = &self.stats;
        match mode {
            StatMode::SourceOnly => (st.mu_s.clone(), st.var_s.clone()),
            StatMode::TestOnly | StatMode::TrainBatch => (st.mu_t.clone(), st.var_t.clone()),
            StatMode::Eval => (st.eval_mu.clone(), st.eval_var.clone()),
            StatMode::Blended => {
                // exact collapse at the endpoints keeps the no-op chain bitwise
                let a = st.alpha;
                if a == 1.0 {
                    (st.mu_s.clone(), st.var_s.clone())
                } else if a == 0.0 {
                    (st.mu_t.clone(), st.var_t.clone())
                } else {
                    let mu = st
                        .mu_s
                        .iter()
                        .zip(&st.mu_t)
                        .map(|(s, t)| a * s + (1.0 - a) * t)
                        .collect();
                    let var = st
                        .var_s
                        .iter()
                        .zip(&st.var_t)
                        .map(|(s, t)| a * s + (1.0 - a) * t)
                        .collect();
                    (mu, var)
                }
            }
        }
    }

    /// Freeze the statistics `mode` resolves to right now as the evaluation
    /// statistics.
    pub fn freeze_eval_stats(&mut self, mode: StatMode) {
        let (mu, var) = self.resolve_stats(mode);
        self.stats.eval_mu = mu;
        self.stats.eval_var = var;
    }

    /// Exponential running update of the source statistics from the current
    /// batch statistics (training time).
    pub fn update_source_running(&mut self, decay: f32) {
        for (s, t) in self.stats.mu_s.iter_mut().zip(&self.stats.mu_t) {
            *s = decay * *s + (1.0 - decay) * t;
        }
        for (s, t) in self.stats.var_s.iter_mut().zip(&self.stats.var_t) {
            *s = decay * *s + (1.0 - decay) * t;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Temporal padding replicates edge frames instead of zeros, keeping
    /// time-constant inputs time-constant.
    pub time_edge: bool,
}

impl ConvLayer {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let weight = Param::new(format!("{name}.weight"), kaiming_normal(&shape, fan_in, rng));
        let bias = with_bias
            .then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        ConvLayer {
            weight,
            bias,
            stride,
            pad,
            time_edge: true,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv3d_with(x, w, b, self.stride, self.pad, self.time_edge)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Param, // [in, out]
    pub bias: Param,   // [out]
}

impl LinearLayer {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: Param::new(
                format!("{name}.weight"),
                normal(&[c_in, c_out], 0.01, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Time-only non-local attention in residual form. Spatially pools the input
/// to [N,T,C], attends over T, and adds the result back over H,W.
#[derive(Clone, Debug)]
pub struct TemporalNonLocal {
    pub proj_theta: Param,
    pub proj_phi: Param,
    pub proj_g: Param,
    pub scale: f32,
}

impl TemporalNonLocal {
    /// `proj_g` starts at zero so the module is the identity at creation.
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        TemporalNonLocal {
            proj_theta: Param::new(
                format!("{name}.theta"),
                normal(&[channels, channels], 0.01, rng),
            ),
            proj_phi: Param::new(
                format!("{name}.phi"),
                normal(&[channels, channels], 0.01, rng),
            ),
            proj_g: Param::new(format!("{name}.g"), Tensor::zeros(&[channels, channels])),
            scale: 1.0 / (channels as f32).sqrt(),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.proj_theta.clone(),
            self.proj_phi.clone(),
            self.proj_g.clone(),
        ]
    }

    /// Returns `(output, attention)` where attention is the [N,T,T] matrix.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: s,
            });
        }
        let (n, c, t) = (s[0], s[1], s[2]);
        if t < 2 {
            return Err(TecoError::TimeTooShort { t, min: 2 });
        }
        let u = g.spatial_pool(x)?; // [N,T,C]
        let flat = g.reshape(u, vec![n * t, c])?;
        let theta = g.param(&self.proj_theta);
        let phi = g.param(&self.proj_phi);
        let gp = g.param(&self.proj_g);
        let q = g.matmul(flat, theta)?;
        let k = g.matmul(flat, phi)?;
        let v = g.matmul(flat, gp)?;
        let q = g.reshape(q, vec![n, t, c])?;
        let k = g.reshape(k, vec![n, t, c])?;
        let v = g.reshape(v, vec![n, t, c])?;
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?; // [N,T,T]
        let scores = g.scale(scores, self.scale);
        let attn = g.softmax(scores, 2)?;
        let mixed = g.bmm(attn, v)?; // [N,T,C]
        let out = g.spatial_broadcast_add(x, mixed)?;
        Ok((out, attn))
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_attention(g, x)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroupTag {
    ShallowAll,
    DeepNormAffine,
    Frozen,
}

/// A disjoint partition of every model parameter.
#[derive(Clone, Debug, Default)]
pub struct Partition {
    pub shallow: Vec<Param>,
    pub deep_norm_affine: Vec<Param>,
    pub frozen: Vec<Param>,
}

impl Partition {
    pub fn updatable(&self) -> Vec<Param> {
        let mut v = self.shallow.clone();
        v.extend(self.deep_norm_affine.iter().cloned());
        v
    }

    pub fn all(&self) -> Vec<Param> {
        let mut v = self.updatable();
        v.extend(self.frozen.iter().cloned());
        v
    }
}

pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| std * sample_standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Box-Muller, deterministic under a seeded ChaCha stream.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-12 {
            let r = (-2.0 * u1.ln()).sqrt();
            return (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}
