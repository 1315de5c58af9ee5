use crate::error::{Result, TecoError};

use super::conv::{conv3d_backward, conv3d_forward, ConvDims};
use super::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

enum Op {
    Constant,
    Input,
    Param(Param),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Abs(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    Reshape(NodeId),
    Reduce {
        input: NodeId,
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    Softmax {
        input: NodeId,
        axis: usize,
    },
    LogSoftmax {
        input: NodeId,
        axis: usize,
    },
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dims: ConvDims,
    },
    /// y = gamma * (x - mu) / sqrt(var + eps) + shift, per channel (axis 1 of
    /// a 5-d input); mu/var are batch constants, no gradient flows to them.
    NormAffine {
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        mu: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    },
    /// y = gamma * (x - mu_b) / sqrt(var_b + eps) + shift where mu_b/var_b are
    /// the per-channel batch statistics of `input` itself; unlike NormAffine,
    /// gradients flow through the statistics (standard batch-norm backward).
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        mu: Vec<f32>,
        inv: Vec<f32>,
    },
    /// [N,C,T,H,W] -> [N,T,C] mean over the two spatial axes.
    SpatialPool(NodeId),
    /// x [N,C,T,H,W] + v [N,T,C] broadcast over H,W.
    SpatialBroadcastAdd(NodeId, NodeId),
    /// x [R,C] + b [C] broadcast over rows.
    AddRowBias(NodeId, NodeId),
    /// Index the time axis (axis 2) of a 5-d tensor: [N,C,T,H,W] -> [N,C,H,W].
    SliceTime(NodeId, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run tape. Rebuilt for every forward pass; `backward` may run once.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Constant)
    }

    /// A leaf whose gradient is tracked (for gradient checks on raw inputs).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Input)
    }

    pub fn param(&mut self, p: &Param) -> NodeId {
        let value = p.value().clone();
        self.push(value, true, Op::Param(p.clone()))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TecoError::ShapeMismatch {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * c).collect(),
        };
        let ng = self.needs(a);
        self.push(out, ng, Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.abs()).collect(),
        };
        let ng = self.needs(a);
        self.push(out, ng, Op::Abs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.max(0.0)).collect(),
        };
        let ng = self.needs(a);
        self.push(out, ng, Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.ln()).collect(),
        };
        let ng = self.needs(a);
        self.push(out, ng, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.exp()).collect(),
        };
        let ng = self.needs(a);
        self.push(out, ng, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TecoError::DimMismatch {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul2(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            ng,
            Op::Matmul(a, b),
        ))
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TecoError::DimMismatch {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0f32; bsz * m * n];
        for i in 0..bsz {
            let c = matmul2(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&c);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![bsz, m, n],
                data,
            },
            ng,
            Op::Bmm(a, b),
        ))
    }

    /// [B,M,N] -> [B,N,M].
    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(TecoError::RankMismatch {
                expected: 3,
                shape: s.to_vec(),
            });
        }
        let (b, m, n) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut data = vec![0.0f32; src.len()];
        for i in 0..b {
            for r in 0..m {
                for c in 0..n {
                    data[(i * n + c) * m + r] = src[(i * m + r) * n + c];
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![b, n, m],
                data,
            },
            ng,
            Op::TransposeLast2(a),
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TecoError::DataLength {
                len: self.value(a).numel(),
                shape,
            });
        }
        let data = self.value(a).data().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor { shape, data }, ng, Op::Reshape(a)))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let in_shape = self.value(a).shape().to_vec();
        let rank = in_shape.len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= rank {
                return Err(TecoError::InvalidAxis { axis: ax, rank });
            }
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|i| !axes.contains(i))
            .map(|i| in_shape[i])
            .collect();
        let count: usize = axes.iter().map(|&i| in_shape[i]).product();
        let out_numel: usize = out_shape.iter().product();
        let mut data = vec![0.0f32; out_numel];
        let src = self.value(a).data();
        // sequential accumulation in input order
        for (flat, v) in src.iter().enumerate() {
            data[reduce_out_index(flat, &in_shape, &axes)] += v;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f32;
            for v in &mut data {
                *v *= inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            ng,
            Op::Reduce {
                input: a,
                kind,
                axes,
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.value(a).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceKind::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.value(a).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(ReduceKind::Mean, a, &axes)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_like(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_like(a, axis, true)
    }

    fn softmax_like(&mut self, a: NodeId, axis: usize, log: bool) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TecoError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if self.value(a).data().iter().any(|v| !v.is_finite()) {
            return Err(TecoError::NonFinite {
                op: if log { "log_softmax" } else { "softmax" },
            });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut denom = 0.0f32;
                for l in 0..lane {
                    denom += (src[base + l * inner] - mx).exp();
                }
                if log {
                    let lse = denom.ln();
                    for l in 0..lane {
                        data[base + l * inner] = src[base + l * inner] - mx - lse;
                    }
                } else {
                    for l in 0..lane {
                        data[base + l * inner] = (src[base + l * inner] - mx).exp() / denom;
                    }
                }
            }
        }
        let ng = self.needs(a);
        let op = if log {
            Op::LogSoftmax { input: a, axis }
        } else {
            Op::Softmax { input: a, axis }
        };
        Ok(self.push(Tensor { shape, data }, ng, op))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        self.conv3d_with(input, weight, bias, stride, pad, false)
    }

    /// `time_edge` switches the temporal padding from zeros to edge
    /// replication (spatial padding stays zero).
    pub fn conv3d_with(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
        time_edge: bool,
    ) -> Result<NodeId> {
        let mut dims = ConvDims::from_shapes(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            pad,
        )?;
        if time_edge {
            dims = dims.with_time_edge();
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [dims.c_out] {
                return Err(TecoError::ShapeMismatch {
                    lhs: bs.to_vec(),
                    rhs: vec![dims.c_out],
                });
            }
        }
        let data = conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let ng = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Tensor {
                shape: dims.out_shape(),
                data,
            },
            ng,
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    pub fn norm_affine(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        mu: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    ) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape,
            });
        }
        let c = shape[1];
        if self.value(gamma).numel() != c || self.value(shift).numel() != c || mu.len() != c {
            return Err(TecoError::ShapeMismatch {
                lhs: vec![c],
                rhs: vec![self.value(gamma).numel()],
            });
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.value(input).data();
        let g = self.value(gamma).data().to_vec();
        let s = self.value(shift).data().to_vec();
        let mut data = vec![0.0f32; src.len()];
        for n in 0..shape[0] {
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let base = (n * c + ch) * inner;
                for i in 0..inner {
                    data[base + i] = g[ch] * (src[base + i] - mu[ch]) * inv + s[ch];
                }
            }
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(shift);
        Ok(self.push(
            Tensor { shape, data },
            ng,
            Op::NormAffine {
                input,
                gamma,
                shift,
                mu,
                var,
                eps,
            },
        ))
    }

    /// Normalize with the input's own per-channel batch statistics
    /// (population variance); returns the node plus the (mu, var) used, so a
    /// layer can record them as running estimates.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        shift: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape,
            });
        }
        let c = shape[1];
        if self.value(gamma).numel() != c || self.value(shift).numel() != c {
            return Err(TecoError::ShapeMismatch {
                lhs: vec![c],
                rhs: vec![self.value(gamma).numel()],
            });
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let m = (n * inner) as f32;
        let src = self.value(input).data();
        let mut mu = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * inner;
                for &v in &src[base..base + inner] {
                    acc += v as f64;
                }
            }
            mu[ch] = (acc / m as f64) as f32;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * inner;
                for &v in &src[base..base + inner] {
                    let d = (v - mu[ch]) as f64;
                    sq += d * d;
                }
            }
            var[ch] = (sq / m as f64) as f32;
        }
        let inv: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let sv = self.value(shift).data().to_vec();
        let mut data = vec![0.0f32; src.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * inner;
                for i in 0..inner {
                    data[base + i] = gv[ch] * (src[base + i] - mu[ch]) * inv[ch] + sv[ch];
                }
            }
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(shift);
        let id = self.push(
            Tensor { shape, data },
            ng,
            Op::BatchNorm {
                input,
                gamma,
                shift,
                mu: mu.clone(),
                inv,
            },
        );
        Ok((id, mu, var))
    }

    pub fn spatial_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: s,
            });
        }
        let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let src = self.value(a).data();
        let inv = 1.0 / (h * w) as f32;
        let mut data = vec![0.0f32; n * t * c];
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let base = (((ni * c + ci) * t) + ti) * h * w;
                    let mut acc = 0.0f32;
                    for v in &src[base..base + h * w] {
                        acc += v;
                    }
                    data[(ni * t + ti) * c + ci] = acc * inv;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, t, c],
                data,
            },
            ng,
            Op::SpatialPool(a),
        ))
    }

    pub fn spatial_broadcast_add(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        if xs.len() != 5 || vs.len() != 3 || vs != [xs[0], xs[2], xs[1]] {
            return Err(TecoError::ShapeMismatch { lhs: xs, rhs: vs });
        }
        let (n, c, t, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut data = xv.to_vec();
        for ni in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let add = vv[(ni * t + ti) * c + ci];
                    let base = (((ni * c + ci) * t) + ti) * h * w;
                    for d in &mut data[base..base + h * w] {
                        *d += add;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(
            Tensor { shape: xs, data },
            ng,
            Op::SpatialBroadcastAdd(x, v),
        ))
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(TecoError::ShapeMismatch { lhs: xs, rhs: bs });
        }
        let (r, c) = (xs[0], xs[1]);
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for ri in 0..r {
            for ci in 0..c {
                data[ri * c + ci] += bv[ci];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor { shape: xs, data }, ng, Op::AddRowBias(x, b)))
    }

    pub fn slice_time(&mut self, a: NodeId, t_idx: usize) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: s,
            });
        }
        let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        if t_idx >= t {
            return Err(TecoError::InvalidAxis {
                axis: t_idx,
                rank: t,
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0f32; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let sbase = (((ni * c + ci) * t) + t_idx) * h * w;
                let dbase = (ni * c + ci) * h * w;
                data[dbase..dbase + h * w].copy_from_slice(&src[sbase..sbase + h * w]);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, h, w],
                data,
            },
            ng,
            Op::SliceTime(a, t_idx),
        ))
    }

    /// Reverse-mode adjoint accumulation from a scalar loss. May run once per
    /// graph; param leaves receive their grads via `Param::accumulate_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TecoError::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(TecoError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = self.nodes[idx].grad.take().unwrap();
            self.dispatch_adjoint(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, target: NodeId, update: impl FnOnce(&mut [f32])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let numel = self.nodes[target.0].value.numel();
        let buf = self.nodes[target.0]
            .grad
            .get_or_insert_with(|| vec![0.0f32; numel]);
        update(buf);
    }

    fn dispatch_adjoint(&mut self, idx: usize, g: &[f32]) -> Result<()> {
        // take op out to appease the borrow checker; restored below
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
        match &op {
            Op::Constant | Op::Input => {}
            Op::Param(p) => p.accumulate_grad(g),
            Op::Add(a, b) => {
                self.accum(*a, |buf| add_into(buf, g));
                self.accum(*b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.accum(*a, |buf| add_into(buf, g));
                self.accum(*b, |buf| {
                    for (x, y) in buf.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.accum(*b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }
            Op::Abs(a) => {
                // subgradient 0 at 0
                let av = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[i] += g[i] * s;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / av[i];
                    }
                });
            }
            Op::Exp(a) => {
                let yv = self.nodes[idx].value.data().to_vec();
                self.accum(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * yv[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.needs(*a) {
                    let da = matmul_dc_bt(g, &bv, m, k, n);
                    self.accum(*a, |buf| add_into(buf, &da));
                }
                if self.needs(*b) {
                    let db = matmul_at_dc(&av, g, m, k, n);
                    self.accum(*b, |buf| add_into(buf, &db));
                }
            }
            Op::Bmm(a, b) => {
                let (bsz, m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let n = self.nodes[b.0].value.shape()[2];
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.needs(*a) {
                    let mut da = vec![0.0f32; bsz * m * k];
                    for i in 0..bsz {
                        let d = matmul_dc_bt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                        da[i * m * k..(i + 1) * m * k].copy_from_slice(&d);
                    }
                    self.accum(*a, |buf| add_into(buf, &da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f32; bsz * k * n];
                    for i in 0..bsz {
                        let d = matmul_at_dc(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                        db[i * k * n..(i + 1) * k * n].copy_from_slice(&d);
                    }
                    self.accum(*b, |buf| add_into(buf, &db));
                }
            }
            Op::TransposeLast2(a) => {
                let s = self.nodes[idx].value.shape().to_vec(); // [B,N,M]
                let (b, n, m) = (s[0], s[1], s[2]);
                self.accum(*a, |buf| {
                    for i in 0..b {
                        for c in 0..n {
                            for r in 0..m {
                                buf[(i * m + r) * n + c] += g[(i * n + c) * m + r];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(*a, |buf| add_into(buf, g));
            }
            Op::Reduce { input, kind, axes } => {
                let in_shape = self.nodes[input.0].value.shape().to_vec();
                let count: usize = axes.iter().map(|&i| in_shape[i]).product();
                let factor = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / count as f32,
                };
                let axes = axes.clone();
                self.accum(*input, |buf| {
                    for (flat, b) in buf.iter_mut().enumerate() {
                        *b += g[reduce_out_index(flat, &in_shape, &axes)] * factor;
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[idx].value.data().to_vec();
                let shape = self.nodes[idx].value.shape().to_vec();
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.accum(*input, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = 0.0f32;
                            for l in 0..lane {
                                let k = base + l * inner;
                                dot += g[k] * y[k];
                            }
                            for l in 0..lane {
                                let k = base + l * inner;
                                buf[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let y = self.nodes[idx].value.data().to_vec(); // log-probs
                let shape = self.nodes[idx].value.shape().to_vec();
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.accum(*input, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut gsum = 0.0f32;
                            for l in 0..lane {
                                gsum += g[base + l * inner];
                            }
                            for l in 0..lane {
                                let k = base + l * inner;
                                buf[k] += g[k] - y[k].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            } => {
                let xv = self.nodes[input.0].value.data().to_vec();
                let wv = self.nodes[weight.0].value.data().to_vec();
                let need_dx = self.needs(*input);
                let need_dw = self.needs(*weight);
                let need_db = bias.map(|b| self.needs(b)).unwrap_or(false);
                let (dx, dw, db) = conv3d_backward(&xv, &wv, g, dims, need_dx, need_dw, need_db);
                if let Some(dx) = dx {
                    self.accum(*input, |buf| add_into(buf, &dx));
                }
                if let Some(dw) = dw {
                    self.accum(*weight, |buf| add_into(buf, &dw));
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    self.accum(*b, |buf| add_into(buf, &db));
                }
            }
            Op::NormAffine {
                input,
                gamma,
                shift,
                mu,
                var,
                eps,
            } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let xv = self.nodes[input.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mu = mu.clone();
                if self.needs(*input) {
                    self.accum(*input, |buf| {
                        for ni in 0..n {
                            for ch in 0..c {
                                let k = gv[ch] * inv[ch];
                                let base = (ni * c + ch) * inner;
                                for i in 0..inner {
                                    buf[base + i] += g[base + i] * k;
                                }
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, |buf| {
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * inner;
                                let mut acc = 0.0f32;
                                for i in 0..inner {
                                    acc += g[base + i] * (xv[base + i] - mu[ch]) * inv[ch];
                                }
                                buf[ch] += acc;
                            }
                        }
                    });
                }
                if self.needs(*shift) {
                    self.accum(*shift, |buf| {
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * inner;
                                let mut acc = 0.0f32;
                                for v in &g[base..base + inner] {
                                    acc += v;
                                }
                                buf[ch] += acc;
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                shift,
                mu,
                inv,
            } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f32;
                let xv = self.nodes[input.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                let mu = mu.clone();
                let inv = inv.clone();
                // per-channel sums of dy and dy * xhat, shared by all three grads
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * inner;
                        let mut a = 0.0f32;
                        let mut b = 0.0f32;
                        for i in 0..inner {
                            let dy = g[base + i];
                            a += dy;
                            b += dy * (xv[base + i] - mu[ch]) * inv[ch];
                        }
                        sum_dy[ch] += a;
                        sum_dy_xhat[ch] += b;
                    }
                }
                if self.needs(*input) {
                    self.accum(*input, |buf| {
                        for ni in 0..n {
                            for ch in 0..c {
                                let k = gv[ch] * inv[ch];
                                let mean_dy = sum_dy[ch] / m;
                                let mean_dy_xhat = sum_dy_xhat[ch] / m;
                                let base = (ni * c + ch) * inner;
                                for i in 0..inner {
                                    let xhat = (xv[base + i] - mu[ch]) * inv[ch];
                                    buf[base + i] +=
                                        k * (g[base + i] - mean_dy - xhat * mean_dy_xhat);
                                }
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, |buf| {
                        for ch in 0..c {
                            buf[ch] += sum_dy_xhat[ch];
                        }
                    });
                }
                if self.needs(*shift) {
                    self.accum(*shift, |buf| {
                        for ch in 0..c {
                            buf[ch] += sum_dy[ch];
                        }
                    });
                }
            }
            Op::SpatialPool(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                let inv = 1.0 / (h * w) as f32;
                self.accum(*a, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            for ti in 0..t {
                                let gv = g[(ni * t + ti) * c + ci] * inv;
                                let base = (((ni * c + ci) * t) + ti) * h * w;
                                for b in &mut buf[base..base + h * w] {
                                    *b += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::SpatialBroadcastAdd(x, v) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                self.accum(*x, |buf| add_into(buf, g));
                self.accum(*v, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            for ti in 0..t {
                                let base = (((ni * c + ci) * t) + ti) * h * w;
                                let mut acc = 0.0f32;
                                for gv in &g[base..base + h * w] {
                                    acc += gv;
                                }
                                buf[(ni * t + ti) * c + ci] += acc;
                            }
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let (r, c) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                self.accum(*x, |buf| add_into(buf, g));
                self.accum(*b, |buf| {
                    for ri in 0..r {
                        for ci in 0..c {
                            buf[ci] += g[ri * c + ci];
                        }
                    }
                });
            }
            Op::SliceTime(a, t_idx) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                let t_idx = *t_idx;
                self.accum(*a, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dbase = (((ni * c + ci) * t) + t_idx) * h * w;
                            let sbase = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                buf[dbase + i] += g[sbase + i];
                            }
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

fn add_into(buf: &mut [f32], g: &[f32]) {
    for (a, b) in buf.iter_mut().zip(g) {
        *a += b;
    }
}

/// C[m,n] = A[m,k] * B[k,n], accumulation over p in fixed order.
fn matmul2(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// dA[m,k] = dC[m,n] * B^T: dA[i,p] = sum_j dC[i,j] * B[p,j].
fn matmul_dc_bt(dc: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut da = vec![0.0f32; m * k];
    for i in 0..m {
        for j in 0..n {
            let dv = dc[i * n + j];
            if dv == 0.0 {
                continue;
            }
            for p in 0..k {
                da[i * k + p] += dv * b[p * n + j];
            }
        }
    }
    da
}

/// dB[k,n] = A^T * dC: dB[p,j] = sum_i A[i,p] * dC[i,j].
fn matmul_at_dc(a: &[f32], dc: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut db = vec![0.0f32; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &dc[i * n..(i + 1) * n];
            let brow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                brow[j] += av * drow[j];
            }
        }
    }
    db
}

/// Flat output index for a reduction that drops `axes` from `in_shape`.
fn reduce_out_index(flat: usize, in_shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let rank = in_shape.len();
    let mut coords = vec![0usize; rank];
    for i in (0..rank).rev() {
        coords[i] = rem % in_shape[i];
        rem /= in_shape[i];
    }
    let mut out = 0usize;
    for i in 0..rank {
        if !axes.contains(&i) {
            out = out * in_shape[i] + coords[i];
        }
    }
    out
}
