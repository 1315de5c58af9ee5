use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use teco::adapt::{adapt_offline, AdaptationConfig, Distance, Method};
use teco::corrupt::{corrupt_dataset, CorruptionKind, ALL_KINDS};
use teco::data::{generate_dataset, load_dataset, save_dataset, DEFAULT_CLIP_LEN, NUM_CLASSES};
use teco::eval::{
    compute_mpc, confusion_matrix, evaluate, feature_coherence_report, load_checkpoint, mean_entropy,
    read_results_csv, save_checkpoint, write_results_csv, ResultRow,
};
use teco::model::{train_clean, TrainConfig, VideoClassifier};

#[derive(Parser)]
#[command(name = "teco", about = "Temporal-coherent test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Standard,
    Bn,
    Tent,
    Shot,
    Teco,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Standard => Method::Standard,
            MethodArg::Bn => Method::Bn,
            MethodArg::Tent => Method::Tent,
            MethodArg::Shot => Method::Shot,
            MethodArg::Teco => Method::Teco,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistanceArg {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone, Debug)]
struct AdaptArgs {
    #[arg(long, value_enum, default_value = "teco")]
    method: MethodArg,
    /// source/test statistic blend weight
    #[arg(long, default_value_t = 0.4)]
    alpha: f32,
    /// coherence loss weight
    #[arg(long, default_value_t = 1.0)]
    beta: f32,
    /// pseudo-label loss weight (shot only)
    #[arg(long, default_value_t = 0.3)]
    lambda: f32,
    #[arg(long, default_value_t = 0.005)]
    lr: f32,
    /// lr multiplier for non-affine updatable weights (teco)
    #[arg(long, default_value_t = 0.05)]
    weight_lr_scale: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// coherence gap i between compared time slices
    #[arg(long, default_value_t = 1)]
    time_gap: usize,
    #[arg(long, value_enum, default_value = "l1")]
    distance: DistanceArg,
    /// block index whose output feeds the attention module
    #[arg(long, default_value_t = 2)]
    stage: usize,
    /// blocks before this index are fully trainable at test time
    #[arg(long, default_value_t = 2)]
    split: usize,
    #[arg(long, default_value_t = 4)]
    k_global: usize,
    #[arg(long, default_value_t = 4)]
    k_local: usize,
    #[arg(long, default_value_t = 1)]
    stride_local: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AdaptArgs {
    fn to_config(&self) -> AdaptationConfig {
        AdaptationConfig {
            method: self.method.into(),
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            lr: self.lr,
            weight_lr_scale: self.weight_lr_scale,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            time_gap: self.time_gap,
            distance: match self.distance {
                DistanceArg::L1 => Distance::L1,
                DistanceArg::L2 => Distance::L2,
            },
            coherence_stage: self.stage,
            split_index: self.split,
            k_global: self.k_global,
            k_local: self.k_local,
            stride_local: self.stride_local,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shape video dataset
    GenData {
        #[arg(long, default_value_t = 100)]
        clips_per_class: usize,
        #[arg(long, default_value_t = DEFAULT_CLIP_LEN)]
        clip_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out")]
        out: PathBuf,
    },
    /// Train the classifier on a clean dataset and save a checkpoint
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 8)]
        k_frames: usize,
        #[arg(long, default_value_t = 2)]
        split: usize,
        #[arg(long, default_value_t = 2)]
        stage: usize,
        /// disable horizontal-flip and pad-crop augmentation
        #[arg(long, default_value_t = false)]
        no_augment: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply corruption kinds x severities to a dataset
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        /// output directory; one file per (kind, severity)
        #[arg(long = "out")]
        out: PathBuf,
        /// comma-separated kinds, or "all"
        #[arg(long, default_value = "all")]
        kinds: String,
        /// comma-separated severities in 0..=5
        #[arg(long, default_value = "1,2,3,4,5")]
        severities: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt a checkpoint on a (corrupted) test set
    Adapt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Evaluate a checkpoint: accuracy, entropy and feature coherence
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        k_global: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// print a class confusion matrix
        #[arg(long, default_value_t = false)]
        confusion: bool,
    },
    /// Grid over methods and corruption cells; one CSV row per cell
    Sweep {
        /// trained clean checkpoint
        #[arg(long = "in")]
        input: PathBuf,
        /// clean test dataset
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "out")]
        out: PathBuf,
        /// comma-separated methods
        #[arg(long, default_value = "standard,bn,tent,shot,teco")]
        methods: String,
        #[arg(long, default_value = "all")]
        kinds: String,
        #[arg(long, default_value = "1,2,3,4,5")]
        severities: String,
        /// comma-separated beta grid (teco only); empty = single default
        #[arg(long, default_value = "")]
        betas: String,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Compare two sweep CSVs: per-method mPC and delta
    Report {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn parse_kinds(s: &str) -> anyhow::Result<Vec<CorruptionKind>> {
    if s == "all" {
        return Ok(ALL_KINDS.to_vec());
    }
    s.split(',')
        .map(|k| k.trim().parse::<CorruptionKind>().map_err(Into::into))
        .collect()
}

fn parse_severities(s: &str) -> anyhow::Result<Vec<u32>> {
    s.split(',')
        .map(|v| {
            let sev: u32 = v.trim().parse().context("severity must be an integer")?;
            if sev > 5 {
                bail!("severity {sev} not in 0..=5");
            }
            Ok(sev)
        })
        .collect()
}

fn mpc_of(rows: &[ResultRow], method: &str) -> Option<f32> {
    rows.iter()
        .find(|r| r.method == method && r.kind == "all")
        .map(|r| r.accuracy)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            clips_per_class,
            clip_len,
            seed,
            out,
        } => {
            let ds = generate_dataset(clips_per_class, clip_len, seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} clips ({} classes) to {}",
                ds.clips.len(),
                ds.num_classes,
                out.display()
            );
        }
        Command::Train {
            input,
            out,
            epochs,
            lr,
            momentum,
            batch_size,
            k_frames,
            split,
            stage,
            no_augment,
            seed,
        } => {
            let ds = load_dataset(&input)?;
            let mut model = VideoClassifier::new(NUM_CLASSES, split, stage, seed);
            let cfg = TrainConfig {
                epochs,
                lr,
                momentum,
                batch_size,
                k_frames,
                augment: !no_augment,
                seed,
            };
            let report = train_clean(&mut model, &ds, &cfg)?;
            save_checkpoint(&model, &out)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}: loss {:.4}", i + 1, l);
            }
            println!(
                "trained {} epochs, final loss {:.4}, train accuracy {:.4}",
                epochs,
                report.epoch_losses.last().copied().unwrap_or(f32::NAN),
                report.train_accuracy
            );
        }
        Command::Corrupt {
            input,
            out,
            kinds,
            severities,
            seed,
        } => {
            let ds = load_dataset(&input)?;
            let kinds = parse_kinds(&kinds)?;
            let severities = parse_severities(&severities)?;
            std::fs::create_dir_all(&out)?;
            for ((kind, sev), corrupted) in corrupt_dataset(&ds, &kinds, &severities, seed)? {
                let path = out.join(format!("{}_s{}.tvds", kind.name(), sev));
                save_dataset(&corrupted, &path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Adapt {
            input,
            data,
            out,
            adapt,
        } => {
            let mut model = load_checkpoint(&input)?;
            let ds = load_dataset(&data)?;
            let cfg = adapt.to_config();
            let report = adapt_offline(&mut model, &ds, &cfg)?;
            save_checkpoint(&model, &out)?;
            let first = report.step_entropies.first().copied().unwrap_or(f32::NAN);
            let last = report.step_entropies.last().copied().unwrap_or(f32::NAN);
            println!(
                "adapted with {} over {} steps; batch entropy {:.4} -> {:.4}",
                cfg.method,
                report.step_losses.len(),
                first,
                last
            );
        }
        Command::Eval {
            input,
            data,
            k_global,
            format,
            confusion,
        } => {
            let mut model = load_checkpoint(&input)?;
            let ds = load_dataset(&data)?;
            let acc = evaluate(&mut model, &ds, k_global)?;
            let ent = mean_entropy(&mut model, &ds, k_global)?;
            let coh = feature_coherence_report(&mut model, &ds, 1, k_global, 1)?;
            match format {
                Format::Csv => {
                    println!("metric,value");
                    println!("accuracy,{acc:.6}");
                    println!("mean_entropy,{ent:.6}");
                    println!("feature_coherence,{:.6}", coh.aggregate);
                }
                Format::Json => println!(
                    "{}",
                    serde_json::json!({
                        "accuracy": acc,
                        "mean_entropy": ent,
                        "feature_coherence": coh.aggregate,
                    })
                ),
            }
            if confusion {
                let m = confusion_matrix(&mut model, &ds, k_global)?;
                println!("confusion (rows=true, cols=pred):");
                for row in &m {
                    let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
                    println!("{}", cells.join(" "));
                }
            }
        }
        Command::Sweep {
            input,
            data,
            out,
            methods,
            kinds,
            severities,
            betas,
            adapt,
        } => {
            let base_model = load_checkpoint(&input)?;
            let clean = load_dataset(&data)?;
            let methods: Vec<Method> = methods
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<_, _>>()?;
            let kinds = parse_kinds(&kinds)?;
            let severities = parse_severities(&severities)?;
            let betas: Vec<f32> = if betas.trim().is_empty() {
                vec![adapt.beta]
            } else {
                betas
                    .split(',')
                    .map(|b| b.trim().parse().context("bad beta"))
                    .collect::<anyhow::Result<_>>()?
            };
            let cells = corrupt_dataset(&clean, &kinds, &severities, adapt.seed)?;
            let mut rows = Vec::new();
            for &method in &methods {
                let method_betas: &[f32] = if method == Method::Teco { &betas } else { &betas[..1] };
                for &beta in method_betas {
                    let label = if method_betas.len() > 1 {
                        format!("{method}@beta={beta}")
                    } else {
                        method.to_string()
                    };
                    let mut ca = vec![vec![0.0f32; severities.len()]; kinds.len()];
                    for ((kind, sev), corrupted) in &cells {
                        let mut model = base_model.deep_clone();
                        let cfg = AdaptationConfig {
                            method,
                            beta,
                            ..adapt.to_config()
                        };
                        adapt_offline(&mut model, corrupted, &cfg)?;
                        let acc = evaluate(&mut model, corrupted, cfg.k_global)?;
                        let ki = kinds.iter().position(|k| k == kind).unwrap();
                        let si = severities.iter().position(|s| s == sev).unwrap();
                        ca[ki][si] = acc;
                        rows.push(ResultRow {
                            method: label.clone(),
                            kind: kind.name().to_string(),
                            severity: sev.to_string(),
                            accuracy: acc,
                            seed: adapt.seed,
                        });
                    }
                    let mpc = compute_mpc(&ca)?;
                    rows.push(ResultRow {
                        method: label,
                        kind: "all".to_string(),
                        severity: "all".to_string(),
                        accuracy: mpc,
                        seed: adapt.seed,
                    });
                }
            }
            let mut w = BufWriter::new(File::create(&out)?);
            write_results_csv(&rows, &mut w)?;
            w.flush()?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Report { a, b } => {
            let ra = read_results_csv(&std::fs::read_to_string(&a)?)?;
            let rb = read_results_csv(&std::fs::read_to_string(&b)?)?;
            println!("method,mpc_a,mpc_b,delta");
            let mut methods: Vec<String> = ra
                .iter()
                .filter(|r| r.kind == "all")
                .map(|r| r.method.clone())
                .collect();
            methods.dedup();
            for m in methods {
                let ma = mpc_of(&ra, &m);
                let mb = mpc_of(&rb, &m);
                if let (Some(ma), Some(mb)) = (ma, mb) {
                    println!("{m},{ma:.6},{mb:.6},{:.6}", mb - ma);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
