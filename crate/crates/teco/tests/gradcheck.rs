//! Randomized finite-difference checks for every differentiable graph op and
//! the composite layers built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teco::autodiff::{Graph, NodeId, ReduceKind, Tensor};
use teco::nn::{ConvLayer, NormLayer, StatMode, TemporalNonLocal};

// f32 forward noise vs. truncation trade off differently per op; a probe
// passes if any step size agrees with the analytic gradient. The denominator
// floor plays the role of an absolute tolerance: gradients much smaller than
// the loss scale cannot be resolved beyond it by f32 central differences.
const STEPS: [f32; 3] = [1e-2, 2.5e-2, 1e-1];
const TOL: f32 = 1e-3;
const FLOOR: f32 = 5e-2;
const CASES: usize = 20;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor bounded away from zero, for kinks (abs, relu) and logs.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        let s = if *v >= 0.0 { 1.0 } else { -1.0 };
        *v = s * (v.abs() + 0.2);
    }
    t
}

fn rand_positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.abs() + 0.3;
    }
    t
}

fn rel_err(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Best central-difference agreement across step sizes.
fn best_fd_err(an: f32, mut eval: impl FnMut(f32) -> f32) -> f32 {
    STEPS
        .iter()
        .map(|&h| rel_err(an, (eval(h) - eval(-h)) / (2.0 * h)))
        .fold(f32::INFINITY, f32::min)
}



/// Checks analytic input gradients against central differences on a random
/// subset of coordinates. `build` must append a scalar loss to the graph.
fn gradcheck(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    rng: &mut ChaCha8Rng,
) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    for (ii, input) in inputs.iter().enumerate() {
        assert!(
            !grads[ii].is_empty(),
            "{name}: no gradient reached input {ii}"
        );
        let numel = input.numel();
        let probes = numel.min(4);
        for _ in 0..probes {
            let ci = rng.gen_range(0..numel);
            let eval = |delta: f32| -> f32 {
                let mut g2 = Graph::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == ii {
                            t.data_mut()[ci] += delta;
                        }
                        g2.input(t)
                    })
                    .collect();
                let l = build(&mut g2, &ids2);
                g2.value(l).item()
            };
            let an = grads[ii][ci];
            let best = best_fd_err(an, eval);
            assert!(
                best < TOL,
                "{name}: input {ii} coord {ci}: analytic {an}, best fd rel err {best}"
            );
        }
    }
}

/// Random positive weights make the scalarized loss sensitive to every output.
fn scalarize(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_positive(&shape, rng));
    let p = g.mul(y, w).unwrap();
    let axes: Vec<usize> = (0..shape.len()).collect();
    g.reduce(ReduceKind::Sum, p, &axes).unwrap()
}

fn run_cases(name: &str, seed: u64, f: &dyn Fn(&mut ChaCha8Rng)) {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + case as u64);
        let _ = name;
        f(&mut rng);
    }
}

#[test]
pub fn elementwise_ops() {
    run_cases("add_sub_mul_scale", 1, &|rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let a = rand_tensor(&shape, rng);
        let b = rand_tensor(&shape, rng);
        let r2 = rng.clone();
        gradcheck(
            "add/sub/mul/scale",
            &[a, b],
            &move |g, ids| {
                let s = g.add(ids[0], ids[1]).unwrap();
                let d = g.sub(s, ids[1]).unwrap();
                let m = g.mul(d, ids[1]).unwrap();
                let sc = g.scale(m, 0.7);
                scalarize(g, sc, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn nonlinearities() {
    run_cases("abs_relu_log_exp", 2, &|rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(2..5)];
        let x = rand_tensor_off_zero(&shape, rng);
        let p = rand_positive(&shape, rng);
        let r2 = rng.clone();
        gradcheck(
            "abs/relu/log/exp",
            &[x, p],
            &move |g, ids| {
                let a = g.abs(ids[0]);
                let r = g.relu(ids[0]);
                let l = g.log(ids[1]);
                let e = g.exp(ids[0]);
                let s1 = g.add(a, r).unwrap();
                let s2 = g.add(l, e).unwrap();
                let s = g.add(s1, s2).unwrap();
                scalarize(g, s, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn matmul_and_bmm() {
    run_cases("matmul", 3, &|rng| {
        let (m, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let a = rand_tensor(&[m, k], rng);
        let b = rand_tensor(&[k, n], rng);
        let r2 = rng.clone();
        gradcheck(
            "matmul",
            &[a, b],
            &move |g, ids| {
                let y = g.matmul(ids[0], ids[1]).unwrap();
                scalarize(g, y, &mut r2.clone())
            },
            rng,
        );
    });
    run_cases("bmm", 4, &|rng| {
        let (bsz, m, k, n) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let a = rand_tensor(&[bsz, m, k], rng);
        let b = rand_tensor(&[bsz, k, n], rng);
        let r2 = rng.clone();
        gradcheck(
            "bmm",
            &[a, b],
            &move |g, ids| {
                let bt = g.transpose_last2(ids[1]).unwrap();
                let btt = g.transpose_last2(bt).unwrap();
                let y = g.bmm(ids[0], btt).unwrap();
                scalarize(g, y, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn reshape_and_reduce() {
    run_cases("reshape_reduce", 5, &|rng| {
        let shape = [2, rng.gen_range(1..4), 3];
        let x = rand_tensor(&shape, rng);
        let numel = x.numel();
        let r2 = rng.clone();
        gradcheck(
            "reshape/reduce",
            &[x],
            &move |g, ids| {
                let flat = g.reshape(ids[0], vec![numel]).unwrap();
                let back = g.reshape(flat, vec![2, numel / 6, 3]).unwrap();
                let s = g.reduce(ReduceKind::Mean, back, &[1]).unwrap();
                scalarize(g, s, &mut r2.clone())
            },
            rng,
        );
        let shape2 = [rng.gen_range(2..4), 2, rng.gen_range(2..4)];
        let x2 = rand_tensor(&shape2, rng);
        let r3 = rng.clone();
        gradcheck(
            "reduce_sum_multi_axis",
            &[x2],
            &move |g, ids| {
                let s = g.reduce(ReduceKind::Sum, ids[0], &[0, 2]).unwrap();
                scalarize(g, s, &mut r3.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn softmax_family() {
    run_cases("softmax", 6, &|rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(2..6)];
        let x = rand_tensor(&shape, rng);
        gradcheck(
            "softmax+log_softmax",
            &[x],
            &move |g, ids| {
                let sm = g.softmax(ids[0], 1).unwrap();
                let lsm = g.log_softmax(ids[0], 1).unwrap();
                let p = g.mul(sm, lsm).unwrap();
                let s = g.reduce(ReduceKind::Sum, p, &[0, 1]).unwrap();
                g.scale(s, -1.0)
            },
            rng,
        );
    });
}

#[test]
pub fn conv3d_both_padding_modes() {
    run_cases("conv3d", 7, &|rng| {
        let time_edge = rng.gen_bool(0.5);
        let stride = [1, rng.gen_range(1..3), 1];
        let x = rand_tensor(&[1, 2, 3, 4, 4], rng);
        let w = rand_tensor(&[2, 2, 2, 2, 2], rng);
        let b = rand_tensor(&[2], rng);
        let r2 = rng.clone();
        gradcheck(
            "conv3d",
            &[x, w, b],
            &move |g, ids| {
                let y = g
                    .conv3d_with(ids[0], ids[1], Some(ids[2]), stride, [1, 1, 1], time_edge)
                    .unwrap();
                scalarize(g, y, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn norm_affine_op() {
    run_cases("norm_affine", 8, &|rng| {
        let c = rng.gen_range(1..4);
        let x = rand_tensor(&[2, c, 2, 3, 3], rng);
        let gamma = rand_tensor_off_zero(&[c], rng);
        let shift = rand_tensor(&[c], rng);
        let mu: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let r2 = rng.clone();
        gradcheck(
            "norm_affine",
            &[x, gamma, shift],
            &move |g, ids| {
                let y = g
                    .norm_affine(ids[0], ids[1], ids[2], mu.clone(), var.clone(), 1e-5)
                    .unwrap();
                scalarize(g, y, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn batch_norm_op() {
    run_cases("batch_norm", 8, &|rng| {
        let c = rng.gen_range(1..4);
        let x = rand_tensor(&[2, c, 2, 3, 3], rng);
        let gamma = rand_tensor_off_zero(&[c], rng);
        let shift = rand_tensor(&[c], rng);
        let r2 = rng.clone();
        gradcheck(
            "batch_norm",
            &[x, gamma, shift],
            &move |g, ids| {
                let (y, _, _) = g.batch_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                scalarize(g, y, &mut r2.clone())
            },
            rng,
        );
    });
}

#[test]
pub fn pooling_broadcast_and_slicing() {
    run_cases("pool_broadcast_slice", 9, &|rng| {
        let x = rand_tensor(&[2, 3, 3, 2, 2], rng);
        let r2 = rng.clone();
        gradcheck(
            "spatial_pool",
            &[x.clone()],
            &move |g, ids| {
                let p = g.spatial_pool(ids[0]).unwrap();
                scalarize(g, p, &mut r2.clone())
            },
            rng,
        );
        let v = rand_tensor(&[2, 3, 3], rng);
        let r3 = rng.clone();
        gradcheck(
            "spatial_broadcast_add",
            &[x.clone(), v],
            &move |g, ids| {
                let y = g.spatial_broadcast_add(ids[0], ids[1]).unwrap();
                scalarize(g, y, &mut r3.clone())
            },
            rng,
        );
        gradcheck(
            "slice_time",
            &[x],
            &move |g, ids| {
                let a = g.slice_time(ids[0], 0).unwrap();
                let b = g.slice_time(ids[0], 2).unwrap();
                let d = g.sub(a, b).unwrap();
                let m = g.mul(d, d).unwrap();
                g.reduce(ReduceKind::Sum, m, &[0, 1, 2, 3]).unwrap()
            },
            rng,
        );
        let m2 = rand_tensor(&[3, 4], rng);
        let bias = rand_tensor(&[4], rng);
        let r5 = rng.clone();
        gradcheck(
            "add_row_bias",
            &[m2, bias],
            &move |g, ids| {
                let y = g.add_row_bias(ids[0], ids[1]).unwrap();
                scalarize(g, y, &mut r5.clone())
            },
            rng,
        );
    });
}

/// Composite: conv layer + normalization (fixed statistics) + relu, loss
/// through the layer parameters.
#[test]
pub fn composite_conv_norm_relu_params() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + case as u64);
        let conv = ConvLayer::new("c", 2, 2, [2, 2, 2], [1, 1, 1], [1, 1, 1], true, &mut rng);
        let mut norm = NormLayer::new("n", 2);
        norm.stats.mu_s = vec![0.1, -0.2];
        norm.stats.var_s = vec![0.9, 1.1];
        // a large positive shift keeps all pre-activations clear of the relu
        // kink, so every probe interval is smooth
        for v in norm.shift.value_mut().data_mut() {
            *v = rng.gen_range(2.5f32..3.5);
        }
        let x = rand_tensor(&[1, 2, 3, 3, 3], &mut rng);
        let weights = rand_positive(&[1, 2, 4, 4, 4], &mut rng);

        // the finite-difference evaluations reduce in f64 so the probe is not
        // drowned by f32 accumulation noise; the analytic pass still uses the
        // graph reduction (its adjoint is all-ones)
        let forward = |conv: &ConvLayer, norm: &NormLayer| -> f32 {
            let mut g = Graph::new();
            let xin = g.constant(x.clone());
            let h = conv.forward(&mut g, xin).unwrap();
            let mut norm = norm.clone();
            let h = norm.forward(&mut g, h, StatMode::SourceOnly).unwrap();
            let h = g.relu(h);
            let w = g.constant(weights.clone());
            let p = g.mul(h, w).unwrap();
            g.value(p).data().iter().map(|&v| v as f64).sum::<f64>() as f32
        };

        // analytic grads
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let h = conv.forward(&mut g, xin).unwrap();
        let mut norm_run = norm.clone();
        let h = norm_run.forward(&mut g, h, StatMode::SourceOnly).unwrap();
        let h = g.relu(h);
        let w = g.constant(weights.clone());
        let p = g.mul(h, w).unwrap();
        let s = g.reduce(ReduceKind::Sum, p, &[0, 1, 2, 3, 4]).unwrap();
        g.backward(s).unwrap();

        for param in [
            &conv.weight,
            conv.bias.as_ref().unwrap(),
            &norm.gamma,
            &norm.shift,
        ] {
            let grad = param.grad().expect("param got a gradient");
            let numel = param.value().numel();
            for _ in 0..2 {
                let ci = rng.gen_range(0..numel);
                let orig = param.value().data()[ci];
                let best = best_fd_err(grad[ci], |h| {
                    param.value_mut().data_mut()[ci] = orig + h;
                    let v = forward(&conv, &norm);
                    param.value_mut().data_mut()[ci] = orig;
                    v
                });
                assert!(
                    best < TOL,
                    "{} coord {ci}: analytic {}, best fd rel err {best}",
                    param.name(),
                    grad[ci]
                );
            }
            param.zero_grad();
        }
    }
}

/// Composite: the time-only attention module, gradients through all three
/// projections and the input.
#[test]
pub fn composite_temporal_attention() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + case as u64);
        let c = rng.gen_range(2..4);
        let attn = TemporalNonLocal::new("a", c, &mut rng);
        // move proj_g off its zero init so its gradient path is generic
        for v in attn.proj_g.value_mut().data_mut() {
            *v = rng.gen_range(-0.3f32..0.3);
        }
        let x = rand_tensor(&[1, c, 3, 2, 2], &mut rng);
        let weights = rand_positive(&[1, c, 3, 2, 2], &mut rng);

        let forward = |attn: &TemporalNonLocal, x: &Tensor| -> f32 {
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let y = attn.forward(&mut g, xin).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            let s = g.reduce(ReduceKind::Sum, p, &[0, 1, 2, 3, 4]).unwrap();
            g.value(s).item()
        };

        let mut g = Graph::new();
        let xin = g.input(x.clone());
        let y = attn.forward(&mut g, xin).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        let s = g.reduce(ReduceKind::Sum, p, &[0, 1, 2, 3, 4]).unwrap();
        g.backward(s).unwrap();
        let x_grad = g.grad(xin).unwrap().to_vec();

        // input gradient
        for _ in 0..2 {
            let ci = rng.gen_range(0..x.numel());
            let best = best_fd_err(x_grad[ci], |h| {
                let mut xp = x.clone();
                xp.data_mut()[ci] += h;
                forward(&attn, &xp)
            });
            assert!(
                best < TOL,
                "attention input coord {ci}: analytic {}, best fd rel err {best}",
                x_grad[ci]
            );
        }
        // projection gradients
        for param in attn.params() {
            let grad = param.grad().expect("projection got a gradient");
            for _ in 0..2 {
                let ci = rng.gen_range(0..param.value().numel());
                let orig = param.value().data()[ci];
                let best = best_fd_err(grad[ci], |h| {
                    param.value_mut().data_mut()[ci] = orig + h;
                    let v = forward(&attn, &x);
                    param.value_mut().data_mut()[ci] = orig;
                    v
                });
                assert!(
                    best < TOL,
                    "{} coord {ci}: analytic {}, best fd rel err {best}",
                    param.name(),
                    grad[ci]
                );
            }
            param.zero_grad();
        }
    }
}
