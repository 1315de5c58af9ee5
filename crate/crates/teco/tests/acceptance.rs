//! End-to-end acceptance gate. Each numbered criterion prints one PASS/FAIL
//! line; the test fails if any criterion fails. The benchmark criteria (6-9)
//! share one trained-model fixture to stay inside the runtime budget.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teco::adapt::{adapt_offline, AdaptationConfig, Method};
use teco::autodiff::{Graph, Tensor};
use teco::corrupt::{apply, corrupt_dataset, CorruptionKind, CorruptionSpec, ALL_KINDS};
use teco::data::{batch_from_samples, generate_dataset, uniform_sample, LabeledDataset};
use teco::eval::{compute_mpc, evaluate, feature_coherence_report, mean_entropy};
use teco::model::{train_clean, TrainConfig, VideoClassifier};
use teco::nn::StatMode;

#[path = "gradcheck.rs"]
#[allow(dead_code)]
mod gradchecks;

// benchmark fixture scale and hyperparameters (criteria 6-9)
const TRAIN_CLIPS_PER_CLASS: usize = 100;
const TEST_CLIPS_PER_CLASS: usize = 16;
const TRAIN_SEED: u64 = 100;
const TEST_SEED: u64 = 200;
const TRAIN_EPOCHS: usize = 12;
const TRAIN_LR: f32 = 0.05;
const TRAIN_K: usize = 4;
const BENCH_KINDS: [CorruptionKind; 3] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::Contrast,
    CorruptionKind::Fog,
];
const BENCH_SEVERITIES: [u32; 2] = [3, 5];
const BENCH_SEEDS: [u64; 3] = [11, 12, 13];
const ADAPT_LR: f32 = 0.005;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let suites: [(&str, fn()); 11] = [
        ("elementwise", gradchecks::elementwise_ops),
        ("nonlinearities", gradchecks::nonlinearities),
        ("matmul/bmm", gradchecks::matmul_and_bmm),
        ("reshape/reduce", gradchecks::reshape_and_reduce),
        ("softmax", gradchecks::softmax_family),
        ("conv3d", gradchecks::conv3d_both_padding_modes),
        ("norm_affine", gradchecks::norm_affine_op),
        ("batch_norm", gradchecks::batch_norm_op),
        ("pool/broadcast/slice", gradchecks::pooling_broadcast_and_slicing),
        ("conv+norm+relu", gradchecks::composite_conv_norm_relu_params),
        ("attention", gradchecks::composite_temporal_attention),
    ];
    for (name, f) in suites {
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            return Err(format!("finite-difference suite '{name}' failed"));
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed.as_secs() < 60,
        format!("11 suites x 20 cases in {elapsed:.2?}"),
    )
}

fn predictions(m: &mut VideoClassifier, ds: &LabeledDataset) -> Vec<u32> {
    let samples: Vec<_> = ds
        .clips
        .iter()
        .map(|c| uniform_sample(c, 4, true, 0).unwrap())
        .collect();
    let batch = batch_from_samples(&samples);
    let mut g = Graph::new();
    let logits = m.forward_global(&mut g, &batch, StatMode::Eval).unwrap();
    g.value(logits).data().iter().map(|v| v.to_bits()).collect()
}

fn params_bits(m: &VideoClassifier) -> Vec<(String, Vec<u32>)> {
    m.params()
        .iter()
        .map(|p| (p.name(), p.value().data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_2_noop_chain() -> Outcome {
    let ds = generate_dataset(2, 16, 9).unwrap();
    let base = VideoClassifier::new(8, 2, 2, 7);

    let mut std_m = base.deep_clone();
    adapt_offline(
        &mut std_m,
        &ds,
        &AdaptationConfig {
            method: Method::Standard,
            ..Default::default()
        },
    )
    .unwrap();
    if params_bits(&std_m) != params_bits(&base) {
        return Err("standard adaptation changed parameters".into());
    }

    let shared = AdaptationConfig {
        alpha: 0.4,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let mut teco_m = base.deep_clone();
    adapt_offline(
        &mut teco_m,
        &ds,
        &AdaptationConfig {
            method: Method::Teco,
            lr: 0.0,
            ..shared.clone()
        },
    )
    .unwrap();
    let mut bn_m = base.deep_clone();
    adapt_offline(
        &mut bn_m,
        &ds,
        &AdaptationConfig {
            method: Method::Bn,
            ..shared
        },
    )
    .unwrap();
    if predictions(&mut teco_m, &ds) != predictions(&mut bn_m, &ds) {
        return Err("TeCo(lr=0) vs BN(same alpha): predictions differ".into());
    }
    let base_params = params_bits(&base);
    if params_bits(&teco_m)
        .iter()
        .zip(&base_params)
        .any(|(a, b)| a.1 != b.1)
    {
        return Err("TeCo(lr=0) changed parameters".into());
    }

    let mut a1 = base.deep_clone();
    adapt_offline(
        &mut a1,
        &ds,
        &AdaptationConfig {
            method: Method::Teco,
            alpha: 1.0,
            lr: 0.0,
            batch_size: 8,
            ..Default::default()
        },
    )
    .unwrap();
    if predictions(&mut a1, &ds) != predictions(&mut std_m, &ds) {
        return Err("TeCo(alpha=1, lr=0) vs raw model: predictions differ".into());
    }
    Ok("standard / TeCo(lr=0)=BN / alpha=1 chain bitwise equal".into())
}

fn criterion_3_partition_safety() -> Outcome {
    let ds = generate_dataset(2, 16, 17).unwrap();
    let base = VideoClassifier::new(8, 2, 2, 11);
    for method in Method::ALL {
        let mut m = base.deep_clone();
        let cfg = AdaptationConfig {
            method,
            batch_size: 8,
            lr: 0.01,
            ..Default::default()
        };
        adapt_offline(&mut m, &ds, &cfg).unwrap();
        let updatable: Vec<String> = match method {
            Method::Standard | Method::Bn => Vec::new(),
            Method::Tent | Method::Shot => m
                .partition_parameters(0)
                .unwrap()
                .deep_norm_affine
                .iter()
                .map(|p| p.name())
                .collect(),
            Method::Teco => m
                .partition_parameters(cfg.split_index)
                .unwrap()
                .updatable()
                .iter()
                .map(|p| p.name())
                .collect(),
        };
        for ((name, bits), (_, base_bits)) in params_bits(&m).iter().zip(params_bits(&base)) {
            if !updatable.contains(name) && *bits != base_bits {
                return Err(format!("{method}: non-updatable {name} changed"));
            }
        }
    }
    Ok("all 5 methods leave non-updatable parameters bitwise unchanged".into())
}

fn criterion_4_mpc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let rows = rng.gen_range(1..8);
        let cols = rng.gen_range(1..8);
        let ca: Vec<Vec<f32>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut sum = 0.0f32;
        for row in &ca {
            for &v in row {
                sum += v;
            }
        }
        let oracle = sum / (rows * cols) as f32;
        if compute_mpc(&ca).unwrap() != oracle {
            return Err(format!("matrix {i}: mean mismatch"));
        }
    }
    Ok("100 random matrices match independent summation exactly".into())
}

fn criterion_5_corruption_suite() -> Outcome {
    let ds = generate_dataset(7, 16, 500).unwrap(); // 56 clips
    let clips = &ds.clips[..50];

    for kind in ALL_KINDS {
        let spec = CorruptionSpec {
            kind,
            severity: 0,
            seed: 1,
        };
        let out = apply(&spec, &clips[0]).unwrap();
        if out.frames.data() != clips[0].frames.data() {
            return Err(format!("{kind}: severity 0 not identity"));
        }
    }

    for kind in ALL_KINDS {
        let mut prev = -1.0f32;
        for severity in 1..=5u32 {
            let mut total = 0.0f64;
            for (ci, clip) in clips.iter().enumerate() {
                let spec = CorruptionSpec {
                    kind,
                    severity,
                    seed: 1000 + ci as u64,
                };
                let out = apply(&spec, clip).unwrap();
                if out.frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(format!("{kind} s{severity}: output left [0,1]"));
                }
                total += teco::corrupt::mean_l1(&out, clip) as f64;
            }
            let mean = (total / clips.len() as f64) as f32;
            if mean < prev {
                return Err(format!(
                    "{kind}: distortion not monotone (s{severity}: {mean} < {prev})"
                ));
            }
            prev = mean;
        }
    }

    // empirical sigma on mid-gray frames
    let gray = teco::data::VideoClip {
        frames: Tensor::full(&[8, 3, 32, 32], 0.5),
        label: 0,
    };
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for s in 0..12 {
        let spec = CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity: 3,
            seed: 7000 + s,
        };
        let out = apply(&spec, &gray).unwrap();
        for (a, b) in out.frames.data().iter().zip(gray.frames.data()) {
            let d = (a - b) as f64;
            sq += d * d;
            n += 1;
        }
    }
    let sigma = (sq / n as f64).sqrt() as f32;
    if (sigma - 0.12).abs() > 0.012 {
        return Err(format!("gaussian s3 sigma {sigma} outside 0.12 +/- 10%"));
    }
    Ok(format!(
        "identity/range/monotonicity over 50 clips, gaussian s3 sigma {sigma:.4}"
    ))
}

struct BenchSeedResult {
    mpc_standard: f32,
    mpc_bn: f32,
    mpc_tent: f32,
    mpc_teco: f32,
    mpc_teco_no_lpath: f32,
    entropy_before: f32,
    entropy_after: f32,
    coherence_before: f32,
    coherence_after: f32,
}

struct Bench {
    clean_acc: f32,
    train_secs: f32,
    total_secs: f32,
    seeds: Vec<BenchSeedResult>,
}

fn bench_config(method: Method, seed: u64) -> AdaptationConfig {
    // bn recalibrates with an even source/test blend; the optimizing methods
    // normalize with pure test-batch statistics (alpha 0)
    let alpha = if method == Method::Bn { 0.5 } else { 0.0 };
    AdaptationConfig {
        method,
        alpha,
        lr: ADAPT_LR,
        weight_lr_scale: 0.02,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

fn run_benchmark() -> Result<Bench, String> {
    let start = Instant::now();
    let train = generate_dataset(TRAIN_CLIPS_PER_CLASS, 16, TRAIN_SEED).map_err(|e| e.to_string())?;
    let test = generate_dataset(TEST_CLIPS_PER_CLASS, 16, TEST_SEED).map_err(|e| e.to_string())?;

    let mut model = VideoClassifier::new(8, 2, 2, 1);
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        lr: TRAIN_LR,
        momentum: 0.9,
        batch_size: 16,
        k_frames: TRAIN_K,
        augment: false,
        seed: 1,
    };
    train_clean(&mut model, &train, &cfg).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f32();
    let clean_acc = evaluate(&mut model, &test, 4).map_err(|e| e.to_string())?;
    if clean_acc < 0.90 {
        return Err(format!(
            "clean accuracy {clean_acc:.4} below 0.90 after {TRAIN_EPOCHS} epochs ({train_secs:.0}s)"
        ));
    }

    let mut seeds = Vec::new();
    for &seed in &BENCH_SEEDS {
        let cells =
            corrupt_dataset(&test, &BENCH_KINDS, &BENCH_SEVERITIES, seed).map_err(|e| e.to_string())?;

        let run_method = |method: Method, beta: Option<f32>| -> Result<(f32, Option<(f32, f32, f32, f32)>), String> {
            let mut ca = vec![vec![0.0f32; BENCH_SEVERITIES.len()]; BENCH_KINDS.len()];
            let mut diag = None;
            for (idx, ((_kind, _sev), corrupted)) in cells.iter().enumerate() {
                let mut m = model.deep_clone();
                let mut cfg = bench_config(method, seed);
                if let Some(b) = beta {
                    cfg.beta = b;
                }
                // diagnostics on the first cell (gaussian noise, severity 3)
                let want_diag = idx == 0 && method == Method::Teco && beta.is_none();
                let (ent_before, coh_before) = if want_diag {
                    let mut unadapted = model.deep_clone();
                    adapt_offline(
                        &mut unadapted,
                        corrupted,
                        &AdaptationConfig {
                            method: Method::Standard,
                            ..Default::default()
                        },
                    )
                    .map_err(|e| e.to_string())?;
                    (
                        mean_entropy(&mut unadapted, corrupted, 4).map_err(|e| e.to_string())?,
                        feature_coherence_report(&mut unadapted, corrupted, 1, 4, 1)
                            .map_err(|e| e.to_string())?
                            .aggregate,
                    )
                } else {
                    (0.0, 0.0)
                };
                adapt_offline(&mut m, corrupted, &cfg).map_err(|e| e.to_string())?;
                let acc = evaluate(&mut m, corrupted, cfg.k_global).map_err(|e| e.to_string())?;
                ca[idx / BENCH_SEVERITIES.len()][idx % BENCH_SEVERITIES.len()] = acc;
                if want_diag {
                    let ent_after = mean_entropy(&mut m, corrupted, 4).map_err(|e| e.to_string())?;
                    let coh_after = feature_coherence_report(&mut m, corrupted, 1, 4, 1)
                        .map_err(|e| e.to_string())?
                        .aggregate;
                    diag = Some((ent_before, ent_after, coh_before, coh_after));
                }
            }
            Ok((compute_mpc(&ca).map_err(|e| e.to_string())?, diag))
        };

        let (mpc_standard, _) = run_method(Method::Standard, None)?;
        let (mpc_bn, _) = run_method(Method::Bn, None)?;
        let (mpc_tent, _) = run_method(Method::Tent, None)?;
        let (mpc_teco, diag) = run_method(Method::Teco, None)?;
        let (mpc_teco_no_lpath, _) = run_method(Method::Teco, Some(0.0))?;
        let (entropy_before, entropy_after, coherence_before, coherence_after) =
            diag.ok_or("missing diagnostics")?;

        seeds.push(BenchSeedResult {
            mpc_standard,
            mpc_bn,
            mpc_tent,
            mpc_teco,
            mpc_teco_no_lpath,
            entropy_before,
            entropy_after,
            coherence_before,
            coherence_after,
        });
    }

    Ok(Bench {
        clean_acc,
        train_secs,
        total_secs: start.elapsed().as_secs_f32(),
        seeds,
    })
}

fn mean(xs: impl Iterator<Item = f32>) -> f32 {
    let v: Vec<f32> = xs.collect();
    v.iter().sum::<f32>() / v.len() as f32
}

fn criterion_6_ordering(bench: &Bench) -> Outcome {
    let teco = mean(bench.seeds.iter().map(|s| s.mpc_teco));
    let standard = mean(bench.seeds.iter().map(|s| s.mpc_standard));
    let bn = mean(bench.seeds.iter().map(|s| s.mpc_bn));
    let tent = mean(bench.seeds.iter().map(|s| s.mpc_tent));
    let detail = format!(
        "clean {:.3}; mPC teco {:.3} standard {:.3} bn {:.3} tent {:.3}; {:.0}s total (train {:.0}s)",
        bench.clean_acc, teco, standard, bn, tent, bench.total_secs, bench.train_secs
    );
    check(
        teco > standard + 0.02 && teco >= bn && teco >= tent && bench.total_secs < 1800.0,
        detail,
    )
}

fn criterion_7_ablation(bench: &Bench) -> Outcome {
    let wins = bench
        .seeds
        .iter()
        .filter(|s| s.mpc_teco >= s.mpc_teco_no_lpath)
        .count();
    check(
        wins >= 2,
        format!(
            "teco >= teco(beta=0) on {wins}/3 seeds ({})",
            bench
                .seeds
                .iter()
                .map(|s| format!("{:.3} vs {:.3}", s.mpc_teco, s.mpc_teco_no_lpath))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_8_coherence(bench: &Bench) -> Outcome {
    let wins = bench
        .seeds
        .iter()
        .filter(|s| s.coherence_after < s.coherence_before)
        .count();
    check(
        wins == 3,
        format!(
            "tap coherence lower after adaptation on {wins}/3 seeds ({})",
            bench
                .seeds
                .iter()
                .map(|s| format!("{:.4} -> {:.4}", s.coherence_before, s.coherence_after))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_9_entropy(bench: &Bench) -> Outcome {
    let wins = bench
        .seeds
        .iter()
        .filter(|s| s.entropy_after < s.entropy_before)
        .count();
    check(
        wins == 3,
        format!(
            "prediction entropy lower after adaptation on {wins}/3 seeds ({})",
            bench
                .seeds
                .iter()
                .map(|s| format!("{:.4} -> {:.4}", s.entropy_before, s.entropy_after))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_10_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_teco");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<Vec<u8>, String> {
        let ds = dir.path().join(format!("{tag}_ds.tvds"));
        let ckpt = dir.path().join(format!("{tag}_clean.teco"));
        let csv = dir.path().join(format!("{tag}_sweep.csv"));
        let ok = |st: std::process::Output, step: &str| -> Result<(), String> {
            if st.status.success() {
                Ok(())
            } else {
                Err(format!(
                    "{step} failed: {}",
                    String::from_utf8_lossy(&st.stderr)
                ))
            }
        };
        ok(
            std::process::Command::new(bin)
                .args(["gen-data", "--clips-per-class", "4", "--seed", "5", "--out"])
                .arg(&ds)
                .output()
                .map_err(|e| e.to_string())?,
            "gen-data",
        )?;
        ok(
            std::process::Command::new(bin)
                .args(["train", "--epochs", "1", "--batch-size", "8", "--seed", "5", "--in"])
                .arg(&ds)
                .arg("--out")
                .arg(&ckpt)
                .output()
                .map_err(|e| e.to_string())?,
            "train",
        )?;
        ok(
            std::process::Command::new(bin)
                .args([
                    "sweep",
                    "--methods",
                    "bn,teco",
                    "--kinds",
                    "gaussian_noise",
                    "--severities",
                    "3",
                    "--batch-size",
                    "8",
                    "--seed",
                    "5",
                ])
                .arg("--in")
                .arg(&ckpt)
                .arg("--data")
                .arg(&ds)
                .arg("--out")
                .arg(&csv)
                .output()
                .map_err(|e| e.to_string())?,
            "sweep",
        )?;
        std::fs::read(&csv).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    check(
        a == b,
        format!("two pipeline runs, {} byte CSV reports identical", a.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let bench = run_benchmark();

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", criterion_1_gradients()),
        (2, "exact no-op chain", criterion_2_noop_chain()),
        (3, "partition safety", criterion_3_partition_safety()),
        (4, "mPC oracle", criterion_4_mpc_oracle()),
        (5, "corruption suite", criterion_5_corruption_suite()),
    ];
    match &bench {
        Ok(b) => {
            results.push((6, "robustness ordering", criterion_6_ordering(b)));
            results.push((7, "ablation direction", criterion_7_ablation(b)));
            results.push((8, "coherence effect", criterion_8_coherence(b)));
            results.push((9, "entropy descent", criterion_9_entropy(b)));
        }
        Err(e) => {
            for (id, name) in [
                (6, "robustness ordering"),
                (7, "ablation direction"),
                (8, "coherence effect"),
                (9, "entropy descent"),
            ] {
                results.push((id, name, Err(format!("benchmark fixture failed: {e}"))));
            }
        }
    }
    results.push((10, "determinism", criterion_10_determinism()));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {id} ({name}): PASS — {d}"),
            Err(d) => {
                println!("criterion {id} ({name}): FAIL — {d}");
                failed += 1;
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
